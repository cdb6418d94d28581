"""Experiment flows: teacher and student training, evaluation, ablations, reports."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .config import to_dict
from .container import read_container, write_container
from .data import check_samples, collate, parse_sensors, prepare
from .distill import KDParams
from .grid import ConfigError, SceneSample, VoxelGrid
from .metrics import (
    RANGE_PRESETS,
    ConfusionCounts,
    aggregate,
    condition_breakdown,
    confusion_counts,
    desk_bands,
    range_counts,
)
from .models.fusion import SSCNet, predict_grid
from .models.params import ModelParams
from .synthetic.dataset import read_dataset
from .training import (
    Checkpoint,
    OptimizerConfig,
    Trainer,
    build_model,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
    write_loss_csv,
)


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run."""

    dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    world: Optional[str] = None
    model: ModelParams = field(default_factory=ModelParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    epochs: Optional[int] = None
    steps: int = 2000
    seed: int = 0
    kd: KDParams = field(default_factory=KDParams)
    teacher_sensors: str = "L+C"
    student_sensors: str = "R+C"
    aux_weight: float = 1.0
    depth_weight: float = 1.0
    augment_flip: bool = False
    out_dir: Optional[str] = None

    def __post_init__(self):
        parse_sensors(self.teacher_sensors)
        kind, _ = parse_sensors(self.student_sensors)
        if kind == "lidar":
            raise ConfigError("the student sensor set must not include lidar")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.optimizer.horizon is not None and self.optimizer.horizon < self.optimizer.warmup:
            raise ConfigError("schedule horizon must be >= warmup")

    def total_steps(self, n_samples: int) -> int:
        if self.epochs is not None:
            return self.epochs * math.ceil(n_samples / self.batch_size)
        return self.steps


Data = Union[str, os.PathLike, Sequence[SceneSample]]


def load_samples(data: Data) -> List[SceneSample]:
    if isinstance(data, (str, os.PathLike)):
        return read_dataset(data)
    return list(data)


def _out(cfg: RunConfig, name: str) -> Optional[Path]:
    if cfg.out_dir is None:
        return None
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _finish(trainer: Trainer, model: SSCNet, sensors: str, cfg: RunConfig, name: str, extra=None) -> Checkpoint:
    path = _out(cfg, f"{name}.lcr")
    meta = {"kind": "checkpoint", "step": trainer.step, "run_config": to_dict(cfg)}
    meta.update(extra or {})
    if path is not None:
        save_checkpoint(path, model, sensors, cfg.seed, trainer, to_dict(cfg), extra)
        write_loss_csv(trainer.log, _out(cfg, f"{name}_losses.csv"))
    return Checkpoint(model, sensors, cfg.seed, meta, {}, trainer)


def make_teacher_trainer(samples: Sequence[SceneSample], cfg: RunConfig) -> Trainer:
    samples = check_samples(samples, cfg.teacher_sensors)
    grid, table = samples[0].gt.grid, samples[0].gt.table
    model = build_model(cfg.teacher_sensors, cfg.model, grid, table, seed=cfg.seed)
    data = prepare(samples, cfg.teacher_sensors, cfg.model.image)
    return Trainer(model, data, steps=cfg.total_steps(len(samples)), batch_size=cfg.batch_size,
                   optimizer=cfg.optimizer, weights=(1.0, 0.0, 0.0, 0.0, cfg.aux_weight),
                   depth_weight=cfg.depth_weight, augment_flip=cfg.augment_flip, seed=cfg.seed)


def train_teacher(data: Data, cfg: RunConfig) -> Checkpoint:
    """Train the lidar-fed fusion teacher; sensors are validated before any step."""
    trainer = make_teacher_trainer(load_samples(data), cfg)
    trainer.run()
    return _finish(trainer, trainer.model, cfg.teacher_sensors, cfg, "teacher")


def _teacher_model(teacher) -> SSCNet:
    if isinstance(teacher, (str, os.PathLike)):
        teacher = load_checkpoint(teacher)
    return teacher.model if isinstance(teacher, Checkpoint) else teacher


def make_student_trainer(samples: Sequence[SceneSample], teacher, cfg: RunConfig,
                         use_kd: bool = True) -> Trainer:
    """Student trainer; ``use_kd=False`` gives the plain (adapter-free) baseline."""
    _, camera = parse_sensors(cfg.student_sensors)
    kd = cfg.kd if use_kd else None
    if kd is not None:
        kd.check_student(camera)
    samples = check_samples(samples, cfg.student_sensors)
    grid, table = samples[0].gt.grid, samples[0].gt.table
    adapters = tuple(kd.cmrd_scales) if kd is not None and kd.cmrd else ()
    model = build_model(cfg.student_sensors, cfg.model, grid, table, adapters, cfg.seed)
    if kd is not None:
        model.replace_with_residual = kd.cmrd_replace
    data = prepare(samples, cfg.student_sensors, cfg.model.image)
    t_model, t_data = None, None
    weights = kd.weights if kd is not None else (cfg.kd.weights[0], 0.0, 0.0, 0.0, cfg.kd.weights[4])
    if kd is not None and kd.enabled:
        t_model = _teacher_model(teacher)
        if t_model is None:
            raise ConfigError("distillation is enabled but no teacher was given")
        if t_model.grid != grid or t_model.table != table:
            raise ConfigError("teacher and student data use different grids or label tables")
        teacher_sensors = sensors_of(t_model)
        check_samples(samples, teacher_sensors)
        t_data = prepare(samples, teacher_sensors, t_model.params.image)
    return Trainer(model, data, steps=cfg.total_steps(len(samples)), batch_size=cfg.batch_size,
                   optimizer=cfg.optimizer, weights=weights, kd=kd, teacher=t_model, teacher_data=t_data,
                   depth_weight=cfg.depth_weight, augment_flip=cfg.augment_flip, seed=cfg.seed)


def train_student(data: Data, teacher, cfg: RunConfig, use_kd: bool = True) -> Checkpoint:
    """Distill ``teacher`` (checkpoint, path or model) into a radar-fed student.

    The teacher's parameter checksum is recorded before and after training
    and any change is an error.
    """
    samples = load_samples(data)
    t_model = _teacher_model(teacher) if teacher is not None else None
    before = param_checksum(t_model) if t_model is not None else None
    trainer = make_student_trainer(samples, t_model, cfg, use_kd)
    trainer.run()
    extra = {}
    if t_model is not None:
        after = param_checksum(t_model)
        if after != before:
            raise RuntimeError("teacher parameters changed during student training")
        extra["teacher_checksum"] = after
    return _finish(trainer, trainer.model, cfg.student_sensors, cfg, "student", extra)


# evaluation ---------------------------------------------------------------

def sensors_of(model: SSCNet) -> str:
    return ("L" if model.point_kind == "lidar" else "R") + ("+C" if model.use_camera else "")


def predict_samples(model: SSCNet, samples: Sequence[SceneSample], sensors: Optional[str] = None,
                    batch_size: int = 4) -> List[VoxelGrid]:
    sensors = sensors or sensors_of(model)
    samples = check_samples(samples, sensors)
    if samples[0].gt.grid != model.grid or samples[0].gt.table != model.table:
        raise ConfigError("model and dataset use different grids or label tables")
    data = prepare(samples, sensors, model.params.image, dtype=next(model.parameters()).dtype)
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            b = collate(data[i:i + batch_size])
            out = model(b["pillars"], b["images"], b["geometries"])
            preds += [predict_grid(y, model.grid, model.table) for y in out["logits"]]
    return preds


def resolve_bands(bands, grid):
    if bands is None or bands == "desk":
        return desk_bands(grid)
    if isinstance(bands, str):
        try:
            return RANGE_PRESETS[bands]
        except KeyError:
            raise ConfigError(f"unknown range preset {bands!r}") from None
    return tuple(tuple(b) for b in bands)


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}"


def _band_name(b) -> str:
    lo, hi = b
    return f"{lo:g}-{hi:g}m" if math.isfinite(hi) else f">{lo:g}m"


def metrics_report(preds: Sequence[VoxelGrid], samples: Sequence[SceneSample], bands=None) -> dict:
    """Global, per-class, per-range and per-condition tables from summed counts."""
    if len(preds) != len(samples):
        raise ValueError("one prediction per sample is required")
    for p, s in zip(preds, samples):
        if p.grid != s.gt.grid or p.table != s.gt.table:
            raise ConfigError("prediction and ground truth grids differ")
    table = samples[0].gt.table
    bands = resolve_bands(bands, samples[0].gt.grid)
    counts = [confusion_counts(p, s.gt) for p, s in zip(preds, samples)]
    glob = aggregate(counts)
    per_band = [ConfusionCounts.zeros(table.n_classes) for _ in bands]
    for p, s in zip(preds, samples):
        for k, c in enumerate(range_counts(p, s.gt, bands)):
            per_band[k] = per_band[k] + c
    ranges = [dict(band=b, **aggregate([c])) for b, c in zip(bands, per_band)]
    tags = [s.tags for s in samples]
    return {
        "classes": list(table.class_names),
        "global": glob,
        "per_sample": counts,
        "range": ranges,
        "condition": condition_breakdown(counts, tags, "set"),
        "condition_tag": condition_breakdown(counts, tags, "tag"),
    }


def _tables(report: dict) -> Dict[str, List[List[str]]]:
    cls = report["classes"]
    g = report["global"]
    out = {
        "global": [["IoU", "mIoU"] + cls, [_fmt(g["iou"]), _fmt(g["miou"])] + [_fmt(v) for v in g["per_class"]]],
        "range": [["range", "IoU", "mIoU"]] + [[_band_name(r["band"]), _fmt(r["iou"]), _fmt(r["miou"])]
                                            for r in report["range"]],
    }
    for key, title in (("condition", "condition"), ("condition_tag", "tag")):
        rows = [[title, "voxels", "IoU", "mIoU"]]
        for k, v in report[key].items():
            rows.append([k, str(v["counts"].n_voxels), _fmt(v["iou"]), _fmt(v["miou"])])
        out[key] = rows
    return out


def markdown_table(rows: List[List[str]]) -> str:
    head, *body = rows
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines)


def write_tables(tables: Dict[str, List[List[str]]], out_dir, prefix: str = "") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    md = []
    for name, rows in tables.items():
        p = out_dir / f"{prefix}{name}.csv"
        with open(p, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        written.append(p)
        md.append(f"### {name}\n\n{markdown_table(rows)}\n")
    p = out_dir / f"{prefix}report.md"
    p.write_text("\n".join(md))
    written.append(p)
    return written


def dump_predictions(preds: Sequence[VoxelGrid], path, meta: Optional[dict] = None) -> None:
    tensors = {f"pred/{i}": p.labels for i, p in enumerate(preds)}
    write_container(path, tensors, preds[0].grid, preds[0].table,
                    dict(meta or {}, kind="predictions", n=len(preds)))


def load_predictions(path) -> List[VoxelGrid]:
    c = read_container(path)
    if c.meta.get("kind") != "predictions":
        raise ConfigError(f"{path} is not a prediction dump")
    return [VoxelGrid(c.tensors[f"pred/{i}"], c.grid, c.table) for i in range(int(c.meta["n"]))]


def evaluate(ckpt, data: Data, bands=None, out_dir=None, dump: Optional[str] = None,
             predictions: Optional[Sequence[VoxelGrid]] = None) -> dict:
    """Evaluate a checkpoint (or precomputed / dumped predictions) on a tagged dataset."""
    samples = load_samples(data)
    if predictions is None:
        if isinstance(ckpt, (str, os.PathLike)):
            ckpt = load_checkpoint(ckpt)
        model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
        predictions = predict_samples(model, samples)
    if dump is not None:
        dump_predictions(predictions, dump)
    report = metrics_report(predictions, samples, bands)
    if out_dir is not None:
        report["files"] = write_tables(_tables(report), out_dir)
    return report


def evaluate_dump(dump_path, data: Data, bands=None, out_dir=None) -> dict:
    return evaluate(None, data, bands, out_dir, predictions=load_predictions(dump_path))


# ablations ----------------------------------------------------------------

KD_COMPONENT_ROWS = {
    "R+C": (("none", ()), ("cmrd", ("cmrd",)), ("cmrd+brd", ("cmrd", "brd")),
            ("cmrd+brd+pdd", ("cmrd", "brd", "pdd"))),
    "R": (("none", ()), ("cmrd", ("cmrd",)), ("cmrd+pdd", ("cmrd", "pdd"))),
}


def kd_subset(kd: KDParams, parts: Sequence[str]) -> KDParams:
    return replace(kd, cmrd="cmrd" in parts, brd="brd" in parts, pdd="pdd" in parts)


def _score(model: SSCNet, samples) -> dict:
    preds = predict_samples(model, samples)
    return aggregate([confusion_counts(p, s.gt) for p, s in zip(preds, samples)])


def ablate(cfg: RunConfig, axis: str, train: Data, test: Optional[Data] = None, teacher=None,
           values: Optional[Sequence] = None, out_dir=None) -> List[dict]:
    """One row per setting of ``axis``; every other knob is held at ``cfg``."""
    train_s = load_samples(train)
    test_s = load_samples(test) if test is not None else train_s
    rows = []
    if axis == "stages":
        for st in (values if values is not None else (0, 1, 2, 3)):
            c = replace(cfg, model=replace(cfg.model, fusion=replace(cfg.model.fusion, stages=int(st))))
            tr = make_teacher_trainer(train_s, c).run()
            res = _score(tr.model, test_s)
            rows.append({"setting": f"stages={st}", "iou": res["iou"], "miou": res["miou"],
                         "final_loss": tr.losses()[-1] if tr.log else math.nan,
                         "checksum": param_checksum(tr.model)})
    elif axis in ("kd_components", "kl_direction", "lambda"):
        if teacher is None:
            teacher = train_teacher(train_s, replace(cfg, out_dir=None))
        if axis == "kd_components":
            settings = [(name, kd_subset(cfg.kd, parts), bool(parts))
                        for name, parts in KD_COMPONENT_ROWS[cfg.student_sensors]]
        elif axis == "kl_direction":
            settings = [(f"kl_reverse={r}", replace(cfg.kd, kl_reverse=r), True) for r in (False, True)]
        else:
            lams = values if values is not None else (0.0, 0.5, 1.0, 2.0)
            settings = [(f"lambda={v:g}", replace(cfg.kd, weights=(cfg.kd.weights[0], v, v, v, cfg.kd.weights[4])),
                         True) for v in lams]
        for name, kd, use in settings:
            c = replace(cfg, kd=kd)
            tr = make_student_trainer(train_s, teacher, c, use_kd=use).run()
            res = _score(tr.model, test_s)
            rows.append({"setting": name, "iou": res["iou"], "miou": res["miou"],
                         "final_loss": tr.losses()[-1] if tr.log else math.nan,
                         "checksum": param_checksum(tr.model)})
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    if out_dir is not None:
        table = [["setting", "IoU", "mIoU"]] + [[r["setting"], _fmt(r["iou"]), _fmt(r["miou"])] for r in rows]
        write_tables({f"ablation_{axis}": table}, out_dir)
    return rows


# plots --------------------------------------------------------------------

def loss_curve_svg(loss_csvs: Sequence, out_path, names: Sequence[str] = ("total",)) -> Path:
    """Plot logged loss curves from one or more ``*_losses.csv`` files to SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in loss_csvs:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        for n in names:
            pts = [(int(r["step"]), float(r["value"])) for r in rows if r["name"] == n]
            if pts:
                s, v = zip(*pts)
                ax.plot(s, v, label=f"{Path(path).stem}:{n}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path

"""Objective assembly, the AdamW training loop and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import from_dict, to_dict
from .container import ContainerFormatError, read_container, write_container
from .data import Prepared, collate, flip_sample, parse_sensors
from .distill import KDParams, brd_loss, cmrd_alignment, occupancy_mask_tensor, pdd_loss, total_loss
from .grid import ConfigError, GridConfig, LabelTable
from .losses import LossValue, bev_loss
from .models.fusion import SSCNet, logits_view
from .models.image_branch import depth_supervision_loss
from .models.params import ModelParams
from .models.point_branch import aux_losses

_NAMESPACES = (("point.", "point_branch/"), ("image.", "image_branch/"),
               ("fusion.", "fusion/"), ("adapters.", "adapters/"))


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW with linear warmup then cosine decay to zero at ``horizon``."""

    kind: str = "adamw"
    lr: float = 2e-4
    weight_decay: float = 0.01
    warmup: int = 50
    horizon: Optional[int] = None

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError("only the adamw optimizer is supported")
        if self.horizon is not None and self.horizon < self.warmup:
            raise ConfigError("schedule horizon must be >= warmup")


def lr_at(step: int, cfg: OptimizerConfig, horizon: int) -> float:
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(horizon - cfg.warmup, 1)
    frac = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def build_model(sensors: str, params: ModelParams, grid: GridConfig, table: LabelTable,
                adapter_scales: Sequence[int] = (), seed: int = 0) -> SSCNet:
    kind, camera = parse_sensors(sensors)
    return SSCNet(params, grid, table, kind, camera, adapter_scales, seed)


def teacher_outputs(teacher: SSCNet, batch) -> dict:
    with torch.no_grad():
        out = teacher(batch["pillars"], batch["images"], batch["geometries"], batch.get("flips"))
    Z = teacher.grid.dims[0]
    return {"taps": [t.detach() for t in out["taps"]],
            "logits": logits_view(out["logits"], teacher.table.n_logits, Z).detach()}


def objective(model: SSCNet, batch, weights, kd: Optional[KDParams] = None,
              teacher_out: Optional[dict] = None, depth_weight: float = 1.0) -> LossValue:
    """Forward ``model`` on ``batch`` and assemble the weighted objective."""
    table = model.table
    out = model(batch["pillars"], batch["images"], batch["geometries"], batch.get("flips"))
    Y = logits_view(out["logits"], table.n_logits, model.grid.dims[0])
    gt = batch["gt"]
    task = bev_loss(Y, gt, table)
    aux = aux_losses(out["aux"], gt, table) if out["aux"] is not None else None
    extra = {}
    if out["log_depth"] is not None and depth_weight > 0:
        extra["depth"] = depth_weight * depth_supervision_loss(
            out["log_depth"], batch["feat_depth"], model.params.image.depth_bins, log_input=True)
    cmrd = brd = pdd = None
    w = weights
    if teacher_out is not None and kd is not None:
        t_taps = teacher_out["taps"]
        if kd.cmrd and w[1] > 0 and out["proj"]:
            terms = [cmrd_alignment(out["proj"][i], t_taps[i], occupancy_mask_tensor(gt, table, i))
                     for i in kd.cmrd_scales]
            cmrd = sum(terms) / len(terms)
        if kd.brd and w[2] > 0:
            size = kd.resize_for([tuple(out["taps"][i].shape[-2:]) for i in kd.brd_scales])
            terms = [brd_loss(out["taps"][i], t_taps[i], size) for i in kd.brd_scales]
            brd = sum(terms) / len(terms)
        if kd.pdd and w[3] > 0:
            pdd = pdd_loss(Y, teacher_out["logits"], kd.kl_reverse)
    total = total_loss(task, cmrd, brd, pdd, aux, w, extra)
    # task sub-terms are reported unweighted and do not enter the sum again
    total.components.update({f"bev/{k}": v for k, v in task.components.items()})
    return total


class Trainer:
    """Single-writer optimization loop; every number it logs is seed-determined."""

    def __init__(self, model: SSCNet, data: Sequence[Prepared], *, steps: int, batch_size: int = 4,
                 optimizer: OptimizerConfig = OptimizerConfig(), weights=(1.0, 0.0, 0.0, 0.0, 1.0),
                 kd: Optional[KDParams] = None, teacher: Optional[SSCNet] = None,
                 teacher_data: Optional[Sequence[Prepared]] = None, depth_weight: float = 1.0,
                 augment_flip: bool = False, seed: int = 0):
        self.model = model
        self.data = list(data)
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.optim_cfg = optimizer
        self.horizon = optimizer.horizon or self.steps
        self.weights = tuple(float(x) for x in weights)
        self.kd = kd
        self.teacher = teacher
        self.teacher_data = list(teacher_data) if teacher_data is not None else None
        self.depth_weight = depth_weight
        self.augment_flip = augment_flip
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=optimizer.lr,
                                           weight_decay=optimizer.weight_decay)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.log: List[tuple] = []
        self._teacher_cache = None
        if teacher is not None:
            if self.teacher_data is None or len(self.teacher_data) != len(self.data):
                raise ValueError("teacher inputs must be aligned with the student samples")
            teacher.eval()
            teacher.requires_grad_(False)

    def _teacher_for(self, idx, flips):
        if self.teacher is None:
            return None
        if flips is not None:
            items = [flip_sample(self.teacher_data[i], *f) for i, f in zip(idx, flips)]
            b = collate(items)
            b["flips"] = [tuple(f) for f in flips]
            return teacher_outputs(self.teacher, b)
        if self._teacher_cache is None:
            self._teacher_cache = []
            for p in self.teacher_data:
                o = teacher_outputs(self.teacher, collate([p]))
                self._teacher_cache.append({"taps": [t[0] for t in o["taps"]], "logits": o["logits"][0]})
        rows = [self._teacher_cache[i] for i in idx]
        return {"taps": [torch.stack([r["taps"][k] for r in rows]) for k in range(4)],
                "logits": torch.stack([r["logits"] for r in rows])}

    def train_step(self) -> LossValue:
        n = len(self.data)
        idx = self.rng.choice(n, size=min(self.batch_size, n), replace=False)
        flips = None
        if self.augment_flip:
            flips = (self.rng.random((len(idx), 2)) < 0.5).tolist()
            items = [flip_sample(self.data[i], *f) for i, f in zip(idx, flips)]
        else:
            items = [self.data[i] for i in idx]
        batch = collate(items)
        batch["flips"] = [tuple(f) for f in flips] if flips is not None else None
        t_out = self._teacher_for(idx, flips)
        lr = lr_at(self.step, self.optim_cfg, self.horizon)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = objective(self.model, batch, self.weights, self.kd, t_out, self.depth_weight)
        if not torch.isfinite(loss.value):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        loss.value.backward()
        self.optimizer.step()
        self.log.append((self.step, "total", float(loss.value.detach())))
        for k, v in loss.components.items():
            self.log.append((self.step, k, float(torch.as_tensor(v).detach())))
        self.step += 1
        return loss

    def run(self, until: Optional[int] = None) -> "Trainer":
        stop = self.steps if until is None else min(until, self.steps)
        while self.step < stop:
            self.train_step()
        return self

    def losses(self, name: str = "total") -> List[float]:
        return [v for _, k, v in self.log if k == name]

    # checkpoint state --------------------------------------------------
    def state(self):
        sd = self.optimizer.state_dict()
        tensors = {}
        for pid, st in sd["state"].items():
            for k, v in st.items():
                tensors[f"optim/{pid}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        meta = {"step": self.step, "rng": self.rng.bit_generator.state,
                "param_groups": sd["param_groups"], "log": self.log}
        return tensors, meta

    def load_state(self, tensors: Dict[str, np.ndarray], meta: dict) -> None:
        state: Dict[int, dict] = {}
        for name, arr in tensors.items():
            if not name.startswith("optim/"):
                continue
            _, pid, key = name.split("/", 2)
            state.setdefault(int(pid), {})[key] = torch.from_numpy(np.array(arr))
        self.optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])
        self.log = [tuple(r) for r in meta["log"]]


def write_loss_csv(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "name", "value"])
        for row in log:
            w.writerow([row[0], row[1], repr(float(row[2]))])


def param_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def model_tensors(model: SSCNet) -> Dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        for prefix, ns in _NAMESPACES:
            if name.startswith(prefix):
                out[ns + name[len(prefix):]] = t.detach().cpu().numpy()
                break
        else:
            raise KeyError(f"parameter {name} has no checkpoint namespace")
    return out


def model_spec(model: SSCNet, sensors: str, seed: int) -> dict:
    return {"sensors": sensors, "params": to_dict(model.params), "adapter_scales": list(model.adapter_scales),
            "seed": seed, "stages": model.params.fusion.stages,
            "replace_with_residual": bool(model.replace_with_residual)}


def save_checkpoint(path, model: SSCNet, sensors: str, seed: int, trainer: Optional[Trainer] = None,
                    run_config: Optional[dict] = None, extra_meta: Optional[dict] = None) -> None:
    tensors = model_tensors(model)
    meta = {"kind": "checkpoint", "model": model_spec(model, sensors, seed), "run_config": run_config,
            "step": 0, "trainer": None}
    if trainer is not None:
        t_tensors, t_meta = trainer.state()
        tensors.update(t_tensors)
        meta["trainer"] = t_meta
        meta["step"] = trainer.step
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, tensors, model.grid, model.table, meta)


@dataclass
class Checkpoint:
    model: SSCNet
    sensors: str
    seed: int
    meta: dict
    tensors: Dict[str, np.ndarray]
    trainer: Optional["Trainer"] = None

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def load_checkpoint(path) -> Checkpoint:
    c = read_container(path)
    if c.meta.get("kind") != "checkpoint":
        raise ContainerFormatError("file is not an LCR1 checkpoint")
    spec = c.meta["model"]
    params = from_dict(ModelParams, spec["params"])
    model = build_model(spec["sensors"], params, c.grid, c.table, spec["adapter_scales"], spec["seed"])
    state = {}
    for name in model.state_dict():
        for prefix, ns in _NAMESPACES:
            if name.startswith(prefix):
                key = ns + name[len(prefix):]
                if key not in c.tensors:
                    raise ContainerFormatError(f"checkpoint lacks tensor {key}")
                state[name] = torch.from_numpy(np.array(c.tensors[key]))
                break
    model.load_state_dict(state)
    model.replace_with_residual = bool(spec.get("replace_with_residual", True))
    return Checkpoint(model, spec["sensors"], int(spec["seed"]), c.meta, c.tensors)

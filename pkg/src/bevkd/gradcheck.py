"""Central-difference verification of every differentiable operation.

Each check builds a scalar function of a few leaf tensors in float64,
compares the autograd gradient with symmetric finite differences on a
seeded sample of coordinates, and also along one random direction through
all leaves at once.  The error reported per operation is the largest
normwise relative error ``|g_auto - g_num| / max(|g_auto|, |g_num|)``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .distill import affinity_matrix, brd_loss, cmrd_alignment, occupancy_mask_tensor, pdd_loss
from .grid import GridConfig, LabelTable
from .losses import bev_loss, ce_loss, scal_loss
from .models.fusion import ARF, FusionNet, ResidualAdapter
from .models.image_branch import ImageBranch, depth_supervision_loss, lift_splat, splat_geometry
from .models.params import ImageBranchParams, PointBranchParams
from .models.point_branch import RADAR_FEATURES, PointBranch, aux_losses

THRESHOLD = 1e-4
STEP = 1e-6
_TINY = 1e-12

Builder = Callable[[np.random.Generator], Tuple[Callable[[], torch.Tensor], List[torch.Tensor]]]


@dataclass(frozen=True)
class OpResult:
    op: str
    max_rel_err: float
    n_checked: int
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    seed: int
    threshold: float
    results: Tuple[OpResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[str]:
        return [r.op for r in self.results if not r.passed]

    def format(self) -> str:
        lines = [f"gradcheck seed={self.seed} threshold={self.threshold:.0e}"]
        for r in self.results:
            lines.append(f"{r.op:<22} max_rel_err={r.max_rel_err:.3e} checked={r.n_checked:<5} "
                         f"{'PASS' if r.passed else 'FAIL'}")
        lines.append("ALL PASS" if self.passed else f"FAILED: {', '.join(self.failures())}")
        return "\n".join(lines)


def _rel(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < _TINY:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[[], torch.Tensor], leaves: Sequence[torch.Tensor],
                    rng: np.random.Generator, max_coords: int = 24, h: float = STEP):
    """Return ``(max relative error, number of derivatives compared)``."""
    leaves = list(leaves)
    for t in leaves:
        if t.dtype != torch.float64:
            raise TypeError("gradient checks run in float64")
        t.requires_grad_(True)
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]
    worst, n = 0.0, 0
    with torch.no_grad():
        for t, g in zip(leaves, grads):
            flat = t.view(-1)
            k = min(max_coords, flat.numel())
            coords = rng.choice(flat.numel(), size=k, replace=False)
            num = np.empty(k)
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + h
                fp = fn().item()
                flat[c] = orig - h
                fm = fn().item()
                flat[c] = orig
                num[j] = (fp - fm) / (2 * h)
            worst = max(worst, _rel(g.reshape(-1)[torch.from_numpy(coords)].numpy(), num))
            n += k
        dirs = [torch.from_numpy(rng.standard_normal(t.shape)) for t in leaves]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        for t, d in zip(leaves, dirs):
            t.add_(h * d)
        fp = fn().item()
        for t, d in zip(leaves, dirs):
            t.sub_(2 * h * d)
        fm = fn().item()
        for t, d in zip(leaves, dirs):
            t.add_(h * d)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        worst = max(worst, _rel(np.array([analytic]), np.array([(fp - fm) / (2 * h)])))
        n += 1
    return worst, n


# fixtures -----------------------------------------------------------------

_GRID = GridConfig.tiny()
_TABLE = LabelTable()
_CH = (4, 6, 8)


def _t(rng, *shape, scale=1.0):
    return torch.from_numpy(rng.standard_normal(shape) * scale)


def _labels(rng, B=1):
    Z, H, W = _GRID.dims
    p = np.array([0.55, 0.15, 0.1, 0.05, 0.05, 0.05, 0.05])
    return torch.from_numpy(rng.choice(_TABLE.n_labels, size=(B, Z, H, W), p=p))


def _module(rng, make):
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2 ** 31)))
        m = make().double()
    return m


def _projection(rng, out):
    """Fixed random linear functional so matrix outputs reduce to a scalar."""
    return torch.from_numpy(rng.standard_normal(out.shape))


def _scalarize(rng, fn):
    with torch.no_grad():
        ref = fn()
    outs = ref if isinstance(ref, (list, tuple)) else [ref]
    ws = [_projection(rng, o) for o in outs]

    def f():
        o = fn()
        o = o if isinstance(o, (list, tuple)) else [o]
        return sum((w * x).sum() for w, x in zip(ws, o))
    return f


def _camera_fixture(rng):
    from .synthetic.config import CameraConfig, WorldConfig
    from .synthetic.scene import camera_calibration

    wcfg = WorldConfig(grid=_GRID, camera=CameraConfig(num_views=2, image_size=(8, 16), max_range=4.0))
    K, T = camera_calibration(wcfg)
    params = ImageBranchParams(widths=(4, 4, 4), feature_channels=4, depth_bins=(0.2, 3.4, 8),
                               bev_channels=_CH)
    geom = splat_geometry(K, T, _GRID, params.depth_bins, (2, 4), params.stride)
    return params, geom


def _op_point_branch(rng):
    m = _module(rng, lambda: PointBranch("radar", PointBranchParams(_CH, (1, 1, 1)), _TABLE.n_classes))
    x = _t(rng, 1, len(RADAR_FEATURES), *_GRID.dims[1:])

    def fn():
        feats, aux = m(x)
        return list(feats) + [aux["occupancy"], aux["semantic"]]
    return _scalarize(rng, fn), [x] + list(m.parameters())


def _op_image_branch(rng):
    params, geom = _camera_fixture(rng)
    m = _module(rng, lambda: ImageBranch(params))
    imgs = torch.from_numpy(rng.random((1, 2, 3, 8, 16)))

    def fn():
        feats, log_depth = m(imgs, [geom])
        return list(feats) + [log_depth]
    return _scalarize(rng, fn), [imgs] + list(m.parameters())


def _op_lift_splat(rng):
    _, geom = _camera_fixture(rng)
    f = _t(rng, 2, 4, 2, 4)
    d = torch.softmax(_t(rng, 2, 8, 2, 4), dim=1)
    return _scalarize(rng, lambda: lift_splat(f, d, geom)), [f, d]


def _op_arf(rng):
    m = _module(rng, lambda: ARF(4))
    a, b = _t(rng, 1, 4, 8, 8), _t(rng, 1, 4, 8, 8)
    return _scalarize(rng, lambda: m(a, b)), [a, b] + list(m.parameters())


def _op_adapter(rng):
    m = _module(rng, lambda: ResidualAdapter(4, 4))
    f = _t(rng, 1, 4, 8, 8)
    return _scalarize(rng, lambda: list(m(f))), [f] + list(m.parameters())


def _op_fusion(rng):
    m = _module(rng, lambda: FusionNet(_CH, _TABLE.n_logits, _GRID.dims[0], 3))
    H, W = _GRID.dims[1:]
    pf = [_t(rng, 1, c, H >> i, W >> i) for i, c in enumerate(_CH)]
    cf = [_t(rng, 1, c, H >> i, W >> i) for i, c in enumerate(_CH)]

    def fn():
        y, taps, _ = m(pf, cf)
        return [y] + list(taps)
    return _scalarize(rng, fn), pf + cf + list(m.parameters())


def _logits(rng):
    return _t(rng, 1, _TABLE.n_logits, *_GRID.dims)


def _op_ce(rng):
    y, g = _logits(rng), _labels(rng)
    return (lambda: ce_loss(y, g, _TABLE).value), [y]


def _op_scal(mode):
    def build(rng):
        y, g = _logits(rng), _labels(rng)
        return (lambda: scal_loss(torch.softmax(y, dim=1), g, _TABLE, mode).value), [y]
    return build


def _op_bev(rng):
    y, g = _logits(rng), _labels(rng)
    return (lambda: bev_loss(y, g, _TABLE).value), [y]


def _op_cmrd(rng):
    s, t = _t(rng, 1, 6, 8, 8), _t(rng, 1, 6, 8, 8)
    mask = occupancy_mask_tensor(_labels(rng), _TABLE, 1)
    return (lambda: cmrd_alignment(s, t, mask)), [s]


def _op_affinity(rng):
    f = _t(rng, 4, 6, 6)
    return _scalarize(rng, lambda: affinity_matrix(f)), [f]


def _op_brd(rng):
    s, t = _t(rng, 1, 6, 8, 8), _t(rng, 1, 2, 8, 8)
    return (lambda: brd_loss(s, t, (4, 4))), [s]


def _op_pdd(reverse):
    def build(rng):
        ys, yt = _logits(rng), _logits(rng)
        return (lambda: pdd_loss(ys, yt, reverse)), [ys]
    return build


def _op_depth(rng):
    logits = _t(rng, 2, 8, 2, 4)
    gt = rng.uniform(0, 4, size=(2, 2, 4))
    return (lambda: depth_supervision_loss(torch.log_softmax(logits, dim=-3), gt, (0.2, 3.4, 8),
                                           log_input=True)), [logits]


def _op_aux(rng):
    occ, sem = _t(rng, 1, 16, 16), _t(rng, 1, _TABLE.n_classes, 16, 16)
    g = _labels(rng)

    def fn():
        l_c, l_s = aux_losses({"occupancy": occ, "semantic": sem}, g, _TABLE)
        return l_c + l_s
    return fn, [occ, sem]


GRADCHECK_OPS: Dict[str, Builder] = {
    "point_branch": _op_point_branch,
    "image_branch": _op_image_branch,
    "lift_splat": _op_lift_splat,
    "arf": _op_arf,
    "residual_adapter": _op_adapter,
    "fusion_net": _op_fusion,
    "ce": _op_ce,
    "scal_geo": _op_scal("geo"),
    "scal_sem": _op_scal("sem"),
    "bev_loss": _op_bev,
    "cmrd": _op_cmrd,
    "affinity": _op_affinity,
    "brd": _op_brd,
    "pdd": _op_pdd(False),
    "pdd_reverse": _op_pdd(True),
    "depth_supervision": _op_depth,
    "aux_point": _op_aux,
}


class _DoubledGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x ** 2).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 4 * x  # true derivative is 2x


def corrupted_op(rng):
    """Negative control whose backward is deliberately wrong."""
    x = _t(rng, 3, 4)
    return (lambda: _DoubledGrad.apply(x)), [x]


def run_gradcheck(seed: int = 0, threshold: float = THRESHOLD, ops: Optional[Sequence[str]] = None,
                  extra: Optional[Dict[str, Builder]] = None, max_coords: int = 24) -> GradCheckReport:
    table = dict(GRADCHECK_OPS)
    if ops is not None:
        unknown = set(ops) - set(table)
        if unknown:
            raise KeyError(f"unknown operations {sorted(unknown)}")
        table = {k: table[k] for k in ops}
    table.update(extra or {})
    results = []
    for name, build in table.items():
        # keyed by name so a subset run reproduces the full run's numbers
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        fn, leaves = build(rng)
        err, n = check_gradients(fn, leaves, rng, max_coords)
        results.append(OpResult(name, err, n, bool(err < threshold)))
    return GradCheckReport(seed, threshold, tuple(results))

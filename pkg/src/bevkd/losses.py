"""SSC task losses: voxel cross-entropy and scene-class affinity terms."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import torch

from .grid import LabelTable

SCAL_EPS = 1e-6


@dataclass
class LossValue:
    """A scalar loss and the named terms it is the sum of."""

    value: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)
    warnings: Tuple[str, ...] = ()

    def item(self) -> float:
        return float(self.value.detach())

    def floats(self) -> Dict[str, float]:
        return {k: float(torch.as_tensor(v).detach()) for k, v in self.components.items()}


def _as_batch(logits, gt):
    gt = torch.as_tensor(gt)
    if logits.dim() == 4:
        logits, gt = logits[None], gt[None]
    if logits.dim() != 5 or gt.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(gt.shape)} are inconsistent")
    return logits, gt.long()


def _valid_mask(gt, table: LabelTable, ignore: Optional[Iterable[int]]):
    if ignore is None:
        ignore = () if table.noise_id is None else (table.noise_id,)
    valid = torch.ones_like(gt, dtype=torch.bool)
    for i in ignore:
        valid &= gt != i
    return valid


def ce_loss(logits, gt, table: LabelTable, ignore: Optional[Iterable[int]] = None) -> LossValue:
    """Mean voxel NLL over non-ignored voxels (noise by default).

    ``logits`` is ``(B, C_n+1, Z, H, W)`` (or unbatched).  If every voxel is
    ignored the loss is 0 and the result carries an ``all_ignored`` flag.
    """
    logits, gt = _as_batch(logits, gt)
    valid = _valid_mask(gt, table, ignore)
    if not valid.any():
        warnings.warn("ce_loss: every voxel is ignored", RuntimeWarning, stacklevel=2)
        zero = logits.sum() * 0.0
        return LossValue(zero, {"ce": zero}, ("all_ignored",))
    logp = torch.log_softmax(logits, dim=1).movedim(1, -1)[valid]
    nll = -logp.gather(1, gt[valid][:, None]).mean()
    return LossValue(nll, {"ce": nll})


def _neg_log(x):
    return -torch.log(x.clamp_min(SCAL_EPS))


def _prs_terms(p, t):
    """-log of soft precision, recall and specificity, skipping empty denominators."""
    terms = []
    nominator = (p * t).sum()
    if p.sum() > 0:
        terms.append(_neg_log(nominator / p.sum()))
    if t.sum() > 0:
        terms.append(_neg_log(nominator / t.sum()))
    neg = 1.0 - t
    if neg.sum() > 0:
        terms.append(_neg_log(((1.0 - p) * neg).sum() / neg.sum()))
    return sum(terms) if terms else p.sum() * 0.0


def scal_loss(probs, gt, table: LabelTable, mode: str = "sem",
              ignore: Optional[Iterable[int]] = None) -> LossValue:
    """Scene-class affinity loss on softmax probabilities.

    ``sem`` averages the per-class term over logit classes (empty included)
    present in the ground truth; ``geo`` collapses the classes into a single
    occupied-vs-empty term.  Computed per sample and averaged over the batch.
    """
    probs, gt = _as_batch(probs, gt)
    valid = _valid_mask(gt, table, ignore)
    per_sample = []
    for b in range(probs.shape[0]):
        v = valid[b]
        g = gt[b][v]
        if mode == "geo":
            q = 1.0 - probs[b, table.empty_id][v]
            t = (g != table.empty_id).to(probs.dtype)
            per_sample.append(_prs_terms(q, t))
        elif mode == "sem":
            losses = []
            for c in range(table.n_logits):
                t = (g == c).to(probs.dtype)
                if t.sum() == 0:
                    continue
                losses.append(_prs_terms(probs[b, c][v], t))
            per_sample.append(sum(losses) / len(losses) if losses else probs[b].sum() * 0.0)
        else:
            raise ValueError(f"mode must be 'geo' or 'sem', got {mode!r}")
    value = torch.stack(per_sample).mean()
    return LossValue(value, {f"scal_{mode}": value})


def bev_loss(logits, gt, table: LabelTable) -> LossValue:
    """``ce + scal_geo + scal_sem`` with the three terms reported."""
    logits, gt = _as_batch(logits, gt)
    ce = ce_loss(logits, gt, table)
    probs = torch.softmax(logits, dim=1)
    geo = scal_loss(probs, gt, table, "geo")
    sem = scal_loss(probs, gt, table, "sem")
    comps = {"ce": ce.value, "scal_geo": geo.value, "scal_sem": sem.value}
    return LossValue(ce.value + geo.value + sem.value, comps, ce.warnings)

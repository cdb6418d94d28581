"""scikit-learn style wrappers around the training and inference flows."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import check_samples, collate, parse_sensors, prepare
from .distill import KDParams
from .experiments import RunConfig, make_student_trainer, make_teacher_trainer, predict_samples
from .grid import VoxelGrid
from .metrics import aggregate, confusion_counts
from .models.fusion import logits_view
from .models.params import ModelParams
from .models.point_branch import pillarize
from .training import OptimizerConfig


class _SSCEstimator(BaseEstimator):
    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def _run_config(self, **kw) -> RunConfig:
        opt = OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay, warmup=min(self.warmup, self.steps))
        return RunConfig(model=self.params or ModelParams(), optimizer=opt, batch_size=self.batch_size,
                         steps=self.steps, seed=self.seed, depth_weight=self.depth_weight,
                         augment_flip=self.augment_flip, **kw)

    def predict(self, X) -> List[VoxelGrid]:
        """Label volumes for the scenes in ``X``."""
        self._check_fitted()
        return predict_samples(self.model_, X, self.sensors)

    def predict_logits(self, X) -> np.ndarray:
        """``(N, C_n+1, Z, H, W)`` raw class scores."""
        self._check_fitted()
        samples = check_samples(X, self.sensors)
        data = prepare(samples, self.sensors, self.model_.params.image)
        self.model_.eval()
        with torch.no_grad():
            b = collate(data)
            y = self.model_(b["pillars"], b["images"], b["geometries"])["logits"]
        return logits_view(y, self.model_.table.n_logits, self.model_.grid.dims[0]).numpy()

    def score(self, X, y=None) -> float:
        """Dataset mIoU against the scenes' own ground truth."""
        samples = check_samples(X, self.sensors)
        preds = self.predict(samples)
        return aggregate([confusion_counts(p, s.gt) for p, s in zip(preds, samples)])["miou"]


class FusionSSC(_SSCEstimator):
    """BEV fusion completion network trained directly on labeled scenes.

    ``fit(X)`` takes a list of ``SceneSample``; their ground-truth grids are
    the targets, so ``y`` is ignored.
    """

    def __init__(self, sensors="L+C", params: Optional[ModelParams] = None, steps=500, batch_size=4,
                 lr=2e-4, weight_decay=0.01, warmup=50, aux_weight=1.0, depth_weight=1.0,
                 augment_flip=False, seed=0):
        self.sensors = sensors
        self.params = params
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.aux_weight = aux_weight
        self.depth_weight = depth_weight
        self.augment_flip = augment_flip
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self._run_config(teacher_sensors=self.sensors, aux_weight=self.aux_weight)
        trainer = make_teacher_trainer(X, cfg).run()
        self.model_ = trainer.model
        self.loss_log_ = list(trainer.log)
        return self


class DistilledStudent(_SSCEstimator):
    """Radar-fed student distilled from a fitted ``teacher``.

    ``teacher`` may be a fitted :class:`FusionSSC`, a checkpoint or a model;
    ``kd=None`` trains the same student without any teacher signal.
    """

    def __init__(self, teacher=None, sensors="R+C", kd: Optional[KDParams] = KDParams(),
                 params: Optional[ModelParams] = None, steps=500, batch_size=4, lr=2e-4,
                 weight_decay=0.01, warmup=50, depth_weight=1.0, augment_flip=False, seed=0):
        self.teacher = teacher
        self.sensors = sensors
        self.kd = kd
        self.params = params
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.depth_weight = depth_weight
        self.augment_flip = augment_flip
        self.seed = seed

    def fit(self, X, y=None):
        teacher = self.teacher
        if isinstance(teacher, FusionSSC):
            teacher._check_fitted()
            teacher = teacher.model_
        cfg = self._run_config(student_sensors=self.sensors, kd=self.kd or KDParams())
        trainer = make_student_trainer(X, teacher, cfg, use_kd=self.kd is not None).run()
        self.model_ = trainer.model
        self.loss_log_ = list(trainer.log)
        return self


class Pillarizer(TransformerMixin, BaseEstimator):
    """Scenes to stacked ``(N, C, H, W)`` pillar feature planes."""

    def __init__(self, kind="radar"):
        self.kind = kind

    def fit(self, X, y=None):
        sensors = {"lidar": "L", "radar": "R"}.get(self.kind)
        if sensors is None:
            raise ValueError(f"kind must be 'lidar' or 'radar', got {self.kind!r}")
        parse_sensors(sensors)
        samples = check_samples(X, sensors)
        self.grid_ = samples[0].gt.grid
        return self

    def transform(self, X):
        if not hasattr(self, "grid_"):
            raise NotFittedError("Pillarizer is not fitted yet; call fit first")
        samples = check_samples(X, {"lidar": "L", "radar": "R"}[self.kind])
        if any(s.gt.grid != self.grid_ for s in samples):
            raise ValueError("scenes use a different grid than the one seen in fit")
        return np.stack([pillarize(getattr(s, self.kind), self.grid_).data for s in samples])

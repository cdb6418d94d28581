import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bevkd.distill import KDParams
from bevkd.estimators import DistilledStudent, FusionSSC, Pillarizer
from bevkd.grid import ConfigError, GridConfig
from bevkd.models.params import FusionParams, ImageBranchParams, ModelParams, PointBranchParams
from bevkd.models.point_branch import RADAR_FEATURES
from bevkd.synthetic import WorldConfig, generate_scene
from bevkd.synthetic.config import CameraConfig

CH = (4, 6, 8)
PARAMS = ModelParams(
    point=PointBranchParams(channels=CH),
    image=ImageBranchParams(widths=(4, 4, 4), feature_channels=4, depth_bins=(0.2, 3.4, 8), bev_channels=CH),
    fusion=FusionParams(channels=CH),
)


@pytest.fixture(scope="module")
def scenes():
    world = WorldConfig(grid=GridConfig.tiny(), camera=CameraConfig(num_views=2, image_size=(8, 16), max_range=4.0))
    return [generate_scene(s, world) for s in range(3)]


@pytest.fixture(scope="module")
def teacher(scenes):
    return FusionSSC(params=PARAMS, steps=4, batch_size=2, lr=3e-3, warmup=1).fit(scenes)


def test_get_params_and_clone():
    est = FusionSSC(sensors="L", steps=7)
    p = est.get_params()
    assert p["sensors"] == "L" and p["steps"] == 7
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(lr=0.5)
    assert est.lr == 0.5


def test_unfitted_raises(scenes):
    with pytest.raises(NotFittedError):
        FusionSSC().predict(scenes)
    with pytest.raises(NotFittedError):
        Pillarizer().transform(scenes)


def test_fit_predict_score(teacher, scenes):
    preds = teacher.predict(scenes)
    assert len(preds) == 3 and preds[0].grid == scenes[0].gt.grid
    logits = teacher.predict_logits(scenes[:2])
    assert logits.shape == (2, scenes[0].gt.table.n_logits) + scenes[0].gt.grid.dims
    assert np.array_equal(logits.argmax(axis=1), np.stack([p.labels for p in preds[:2]]))
    s = teacher.score(scenes)
    assert 0.0 <= s <= 1.0
    assert len(teacher.loss_log_) > 0


def test_fit_is_deterministic(scenes):
    a = FusionSSC(params=PARAMS, steps=3, batch_size=2, warmup=1).fit(scenes)
    b = FusionSSC(params=PARAMS, steps=3, batch_size=2, warmup=1).fit(scenes)
    assert a.loss_log_ == b.loss_log_


def test_student_with_and_without_kd(teacher, scenes):
    s = DistilledStudent(teacher=teacher, params=PARAMS, steps=3, batch_size=2, warmup=1).fit(scenes)
    assert s.model_.adapters is not None
    assert any(k == "pdd" for _, k, _ in s.loss_log_)
    base = DistilledStudent(kd=None, params=PARAMS, steps=3, batch_size=2, warmup=1).fit(scenes)
    assert base.model_.adapters is None
    assert len(base.predict(scenes)) == 3


def test_student_input_validation(teacher, scenes):
    with pytest.raises(NotFittedError):
        DistilledStudent(teacher=FusionSSC()).fit(scenes)
    with pytest.raises(ConfigError):
        DistilledStudent(teacher=teacher, sensors="R", kd=KDParams(), params=PARAMS, steps=1).fit(scenes)
    with pytest.raises(TypeError):
        FusionSSC(params=PARAMS, steps=1).fit([1, 2])
    with pytest.raises(ValueError):
        FusionSSC(params=PARAMS, steps=1).fit([])


def test_pillarizer(scenes):
    pz = Pillarizer().fit(scenes)
    X = pz.transform(scenes)
    assert X.shape == (3, len(RADAR_FEATURES), 16, 16)
    assert np.array_equal(pz.fit_transform(scenes), X)
    with pytest.raises(ValueError):
        Pillarizer(kind="sonar").fit(scenes)
    other = generate_scene(0, WorldConfig())
    with pytest.raises(ValueError):
        pz.transform([other])

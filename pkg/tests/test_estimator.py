import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oct_layertrace.estimator import LayerSegmenter, infer_scans
from oct_layertrace.exceptions import ConfigError, DimensionError
from oct_layertrace.model import LayerTraceNet, save_model

from .conftest import tiny_model_config


def _xy(volume):
    return list(volume.images), list(volume.boundaries)


@pytest.fixture
def estimator(tmp_path):
    cfg = tiny_model_config()
    return LayerSegmenter(n_boundaries=3, height=32, width=48, model_config=cfg.to_dict(),
                          train_config={"version": 1, "epochs": 2, "augment": None, "checkpoint_every": 1},
                          out_dir=tmp_path / "run")


def test_params_and_clone(estimator):
    params = estimator.get_params()
    assert params["height"] == 32 and params["n_boundaries"] == 3
    twin = clone(estimator)
    assert twin.get_params()["model_config"] == params["model_config"]
    assert not hasattr(twin, "model_")


def test_predict_before_fit(estimator, tiny_volume):
    with pytest.raises(NotFittedError):
        estimator.predict(list(tiny_volume.images))


def test_fit_predict_score(estimator, tiny_volume):
    X, y = _xy(tiny_volume)
    estimator.fit(X, y, groups=[0] * len(X))
    assert len(estimator.history_) == 2
    pred = estimator.predict(X)
    assert len(pred) == len(X) and pred[0].shape == (3, 48)
    assert np.isfinite(pred[0]).all()
    score = estimator.score(X, y)
    assert np.isfinite(score) and score <= 0
    assert (estimator.out_dir / "latest").exists()


def test_from_checkpoint_matches(tmp_path, tiny_volume):
    model = LayerTraceNet(tiny_model_config())
    save_model(model, tmp_path / "m")
    est = LayerSegmenter.from_checkpoint(tmp_path / "m")
    direct = [r.boundaries for r in infer_scans(model, list(tiny_volume.images))]
    for a, b in zip(est.predict(list(tiny_volume.images)), direct):
        np.testing.assert_array_equal(a, b)


def test_input_validation(estimator, tiny_volume):
    X, y = _xy(tiny_volume)
    with pytest.raises(DimensionError):
        estimator.fit(X[0], y)
    with pytest.raises(ConfigError):
        estimator.fit(X, [b[:2] for b in y])
    with pytest.raises(DimensionError):
        estimator.fit(X, y, groups=[0])


def test_narrower_scans_are_padded(tiny_volume):
    model = LayerTraceNet(tiny_model_config())
    res = infer_scans(model, [tiny_volume.images[0][:, :40]])[0]
    assert res.boundaries.shape == (3, 40) and res.standardized.shape == (3, 48)

"""Estimator wrapper around model, training and inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Volume
from .metrics import boundary_mae
from .model import LayerTraceNet, ModelConfig, load_model
from .preprocess import StandardizedInput, standardize
from .tensor import no_grad
from .training import TrainConfig, train
from .validation import check_boundaries, check_bscans, check_groups


@dataclass
class Inference:
    """Result for one raw B-scan."""

    boundaries: np.ndarray  # (B, W0) raw-image rows
    standardized: np.ndarray  # (B, W) standardized rows
    record: StandardizedInput
    loi: Optional[np.ndarray] = None
    edge: Optional[np.ndarray] = None


def infer_scans(model: LayerTraceNet, scans, batch_size: int = 11, side_outputs: bool = False) -> List[Inference]:
    """Run the network on raw B-scans and map the trace back to raw coordinates."""
    cfg = model.config
    records = [standardize(s, cfg.height, cfg.width) for s in check_bscans(scans)]
    results = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = np.stack([r.stacked(cfg.dtype) for r in chunk])
        with no_grad():
            out = model.forward(x)
        std = out.boundaries.data.astype(np.float64)
        for i, rec in enumerate(chunk):
            results.append(
                Inference(
                    boundaries=rec.to_raw(std[i]),
                    standardized=std[i],
                    record=rec,
                    loi=out.loi.data[i] if side_outputs else None,
                    edge=out.edge.data[i, 0] if side_outputs else None,
                )
            )
    return results


class LayerSegmenter(BaseEstimator):
    """Boundary tracer for B-scans.

    ``X`` is a sequence of raw 2-D scans, ``y`` a matching sequence of (B, W)
    boundary rows in raw coordinates (NaN for unlabelled columns) and
    ``groups`` assigns scans to volumes; each volume is one training batch.
    """

    def __init__(self, n_boundaries: int = 8, height: int = 300, width: int = 800, model_config: Optional[dict] = None,
                 train_config: Optional[dict] = None, out_dir=None, seed: int = 0):
        self.n_boundaries = n_boundaries
        self.height = height
        self.width = width
        self.model_config = model_config
        self.train_config = train_config
        self.out_dir = out_dir
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        if self.model_config is not None:
            return ModelConfig.from_dict(self.model_config)
        if (self.height, self.width) == (300, 800):
            return ModelConfig(n_boundaries=self.n_boundaries, seed=self.seed)
        return ModelConfig.reduced(self.height, self.width, self.n_boundaries, seed=self.seed)

    def fit(self, X, y, groups=None):
        scans = check_bscans(X)
        cfg = self._model_config()
        labels = check_boundaries(y, len(scans), cfg.n_boundaries)
        groups = check_groups(groups, len(scans))
        volumes = []
        for g in dict.fromkeys(groups.tolist()):
            idx = np.flatnonzero(groups == g)
            volumes.append(Volume(np.stack([scans[i] for i in idx]), np.stack([labels[i] for i in idx]), name=str(g)))
        tcfg = TrainConfig.from_dict(self.train_config) if self.train_config else TrainConfig(seed=self.seed)
        model = LayerTraceNet(cfg)
        result = train(model, volumes, tcfg, out_dir=self.out_dir)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = 2
        return self

    @classmethod
    def from_checkpoint(cls, directory) -> "LayerSegmenter":
        model = load_model(directory)
        c = model.config
        est = cls(n_boundaries=c.n_boundaries, height=c.height, width=c.width, model_config=c.to_dict())
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = 2
        return est

    def predict(self, X) -> List[np.ndarray]:
        """Raw-space boundary rows (B, W0) for every scan."""
        check_is_fitted(self, "model_")
        return [r.boundaries for r in infer_scans(self.model_, X)]

    def score(self, X, y) -> float:
        """Negative mean MAE in pixels (higher is better)."""
        pred = self.predict(X)
        truth = check_boundaries(y, len(pred), self.model_.config.n_boundaries)
        return -float(np.nanmean([boundary_mae(p, t).mean() for p, t in zip(pred, truth)]))

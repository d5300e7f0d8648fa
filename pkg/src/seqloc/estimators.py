"""scikit-learn style wrapper around :func:`seqloc.pipeline.fit`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from seqloc.dataset import Dataset
from seqloc.exceptions import InvalidArgumentError
from seqloc.neuralnet import NetConfig
from seqloc.pipeline import PipelineConfig, fit
from seqloc.tree import StoppingRule

TARGET_COLUMNS = ("longitude", "latitude", "floor", "building")


def _dataset(X, y, timestamp=None, role="train") -> Dataset:
    X = check_array(X, dtype=np.float64)
    y = check_array(y, dtype=np.float64)
    if y.shape != (X.shape[0], 4):
        raise InvalidArgumentError(f"y must have shape (n, 4) with columns {TARGET_COLUMNS}, got {y.shape}")
    if not np.array_equal(y[:, 2:], np.round(y[:, 2:])):
        raise InvalidArgumentError("floor and building targets must be integers")
    return Dataset.from_arrays(X, y[:, 0], y[:, 1], y[:, 2].astype(np.int64), y[:, 3].astype(np.int64),
                               timestamp=timestamp, role=role)


class SequentialLocalizer(RegressorMixin, BaseEstimator):
    """Predicts ``[longitude, latitude, floor, building]`` from raw RSSI rows.

    ``X`` holds one column per AP (100 or -105 for non-detection). Without an
    explicit validation set, the last tenth of the training rows is held out
    for split scoring and early stopping.
    """

    def __init__(self, variant="scnn", min_subsample=800, min_accuracy=0.98, max_depth=6, m_folds=2,
                 stability_threshold=30.0, weight_gamma=1.0, net=None, spatial_clustering=False,
                 random_state=0, n_jobs=1):
        self.variant = variant
        self.min_subsample = min_subsample
        self.min_accuracy = min_accuracy
        self.max_depth = max_depth
        self.m_folds = m_folds
        self.stability_threshold = stability_threshold
        self.weight_gamma = weight_gamma
        self.net = net
        self.spatial_clustering = spatial_clustering
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            m_folds=self.m_folds,
            stability_threshold_m=self.stability_threshold,
            weight_gamma=self.weight_gamma,
            stopping=StoppingRule(self.min_subsample, self.min_accuracy, self.max_depth),
            net=self.net if self.net is not None else NetConfig(),
            spatial_clustering=self.spatial_clustering,
            seed=int(self.random_state),
            threads=int(self.n_jobs),
        )

    def fit(self, X, y, X_val=None, y_val=None, timestamp=None):
        train = _dataset(X, y, timestamp)
        if (X_val is None) != (y_val is None):
            raise InvalidArgumentError("pass both X_val and y_val, or neither")
        if X_val is None:
            if train.n < 10:
                raise InvalidArgumentError("need at least 10 rows to hold out a validation tenth")
            cut = train.n - max(1, train.n // 10)
            train, val = train.subset(np.arange(cut)), train.subset(np.arange(cut, train.n)).with_role("validation")
        else:
            val = _dataset(X_val, y_val, role="validation")
        self.predictor_ = fit(self.variant, train, val, self._config())
        self.n_features_in_ = train.r
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "predictor_")
        X = check_array(X, dtype=np.float64)
        preds = self.predictor_.predict_batch(X)
        return np.array([[p.longitude, p.latitude, p.floor, p.building] for p in preds], dtype=np.float64)

    def score(self, X, y, sample_weight=None):
        """Negative mean planar error in meters (higher is better)."""
        y = check_array(y, dtype=np.float64)
        pred = self.predict(X)
        err = np.hypot(pred[:, 0] - y[:, 0], pred[:, 1] - y[:, 1])
        return -float(np.average(err, weights=sample_weight))

    @property
    def n_leaves_(self) -> int:
        check_is_fitted(self, "predictor_")
        return len(self.predictor_.leaves())

"""RSSI cleaning and access-point feature filtering."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import partial
from itertools import combinations
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from seqloc.dataset import NONDETECT, NONDETECT_RAW, RSSI_MAX, RSSI_MIN, Dataset, split_by_time
from seqloc.exceptions import DataIntegrityError, DegenerateWeightsError, InvalidArgumentError

ZERO_VARIANCE = "zero_variance"
UNSTABLE_LOCATION = "unstable_location"

WeightFn = Callable[[np.ndarray], np.ndarray]


def power_weight(rssi, gamma: float = 1.0):
    """Linear-power weight ``10 ** (gamma * rssi / 10)``."""
    return np.power(10.0, gamma * np.asarray(rssi, dtype=np.float64) / 10.0)


def make_weight_fn(gamma: float = 1.0) -> WeightFn:
    return partial(power_weight, gamma=gamma)


@dataclass(frozen=True)
class FeatureFilter:
    kept: tuple[int, ...]
    reasons: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        kept = tuple(int(k) for k in self.kept)
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise InvalidArgumentError("kept indices must be strictly increasing")
        reasons = {int(k): str(v) for k, v in self.reasons.items()}
        overlap = set(kept) & set(reasons)
        if overlap:
            raise InvalidArgumentError(f"indices both kept and dropped: {sorted(overlap)}")
        covered = sorted(set(kept) | set(reasons))
        if covered != list(range(len(covered))):
            raise InvalidArgumentError("kept and dropped indices must partition 0..R-1")
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "reasons", dict(sorted(reasons.items())))

    @property
    def r_raw(self) -> int:
        return len(self.kept) + len(self.reasons)

    @classmethod
    def identity(cls, r: int) -> "FeatureFilter":
        return cls(kept=tuple(range(r)))

    @classmethod
    def from_drops(cls, r: int, reasons: dict[int, str]) -> "FeatureFilter":
        return cls(kept=tuple(j for j in range(r) if j not in reasons), reasons=reasons)

    def combine(self, other: "FeatureFilter") -> "FeatureFilter":
        """Union of the drops of two filters over the same raw width.

        A column dropped by both keeps this filter's reason.
        """
        if other.r_raw != self.r_raw:
            raise InvalidArgumentError(f"filter widths differ: {self.r_raw} vs {other.r_raw}")
        reasons = dict(other.reasons)
        reasons.update(self.reasons)
        return FeatureFilter.from_drops(self.r_raw, reasons)

    def histogram(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for reason in self.reasons.values():
            out[reason] = out.get(reason, 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps({"kept": list(self.kept), "reasons": {str(k): v for k, v in self.reasons.items()}})

    @classmethod
    def from_json(cls, text: str) -> "FeatureFilter":
        d = json.loads(text)
        return cls(kept=tuple(d["kept"]), reasons={int(k): v for k, v in d["reasons"].items()})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureFilter":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class ApLocationEstimate:
    ap_index: int
    position: tuple[float, float]
    support: int


def recode_rssi(rssi) -> np.ndarray:
    """Array-level recode: sentinel 100 becomes -105, everything else is checked and kept."""
    a = np.array(rssi, dtype=np.float64, copy=True)
    valid = (a == NONDETECT_RAW) | (a == NONDETECT) | ((a >= RSSI_MIN) & (a <= RSSI_MAX))
    if not valid.all():
        bad = np.argwhere(~valid)[0]
        if a.ndim == 2:
            row, col = int(bad[0]), int(bad[1])
        else:
            row, col = None, int(bad[0])
        raise DataIntegrityError(
            f"RSSI value {a[tuple(bad)]} at row {row}, column {col} is outside [-104, 0] and not a sentinel",
            row=row,
            column=col,
        )
    a[a == NONDETECT_RAW] = NONDETECT
    return a


def recode_nondetect(ds: Dataset) -> Dataset:
    return ds.with_rssi(recode_rssi(ds.rssi))


def _constant_columns(rssi: np.ndarray) -> np.ndarray:
    if rssi.shape[0] == 0:
        return np.ones(rssi.shape[1], dtype=bool)
    return (rssi == rssi[0]).all(axis=0)


def zero_variance_filter(train: Dataset, validation: Dataset) -> FeatureFilter:
    """Drop every AP whose column is constant in train or in validation."""
    if train.r != validation.r:
        raise InvalidArgumentError(f"feature counts differ: train r={train.r}, validation r={validation.r}")
    constant = _constant_columns(train.rssi) | _constant_columns(validation.rssi)
    return FeatureFilter.from_drops(train.r, {int(j): ZERO_VARIANCE for j in np.flatnonzero(constant)})


def estimate_ap_location(ds: Dataset, ap_index: int, weight_fn: WeightFn | None = None):
    """Weighted centroid of the fingerprints that detect ``ap_index``.

    Returns ``None`` when no fingerprint detects the AP.
    """
    weight_fn = weight_fn or power_weight
    col = ds.rssi[:, ap_index]
    detected = col > NONDETECT
    if not detected.any():
        return None
    w = np.asarray(weight_fn(col[detected]), dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateWeightsError(f"AP {ap_index}: weight function returned negative or non-finite weights")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError(f"AP {ap_index}: all {int(detected.sum())} weights are zero")
    lon = float(np.dot(w, ds.longitude[detected]) / total)
    lat = float(np.dot(w, ds.latitude[detected]) / total)
    return ApLocationEstimate(int(ap_index), (lon, lat), int(detected.sum()))


def estimate_all_ap_locations(ds: Dataset, weight_fn: WeightFn | None = None, indices=None):
    indices = range(ds.r) if indices is None else indices
    return [e for j in indices if (e := estimate_ap_location(ds, j, weight_fn)) is not None]


def fold_displacements(train: Dataset, m: int = 2, weight_fn: WeightFn | None = None, indices=None) -> dict[int, float]:
    """Largest pairwise distance between per-fold estimates, per AP.

    ``inf`` marks an AP seen in some folds but not others; APs never seen in
    any fold are left out.
    """
    folds = split_by_time(train, m)
    indices = range(train.r) if indices is None else indices
    out = {}
    for j in indices:
        ests = [estimate_ap_location(f, j, weight_fn) for f in folds]
        seen = [e for e in ests if e is not None]
        if not seen:
            continue
        if len(seen) < len(ests):
            out[int(j)] = float("inf")
            continue
        pts = np.array([e.position for e in seen])
        out[int(j)] = max((float(np.hypot(*(a - b))) for a, b in combinations(pts, 2)), default=0.0)
    return out


def stability_filter(train: Dataset, m: int = 2, distance_threshold: float = 30.0,
                     weight_fn: WeightFn | None = None, indices=None) -> FeatureFilter:
    """Drop APs whose fold-wise location estimates disagree by more than ``distance_threshold`` meters."""
    if m < 2:
        raise InvalidArgumentError(f"m must be >= 2, got {m}")
    disp = fold_displacements(train, m, weight_fn, indices)
    drops = {j: UNSTABLE_LOCATION for j, d in disp.items() if d > distance_threshold}
    return FeatureFilter.from_drops(train.r, drops)


def build_filter(train: Dataset, validation: Dataset, m: int = 2, distance_threshold: float = 30.0,
                 weight_fn: WeightFn | None = None) -> FeatureFilter:
    """Zero-variance filter first, then the stability filter on the survivors."""
    zv = zero_variance_filter(train, validation)
    return zv.combine(stability_filter(train, m, distance_threshold, weight_fn, indices=zv.kept))


def calibrate_threshold(train: Dataset, validation: Dataset, target_kept: int = 320, m: int = 2,
                        weight_fn: WeightFn | None = None) -> tuple[float, int]:
    """Find a stability threshold whose combined filter keeps ``target_kept`` APs.

    Returns ``(threshold, kept)``. When displacement ties make the exact
    target unreachable, ``kept`` is the smallest reachable count above it.
    """
    zv = zero_variance_filter(train, validation)
    disp = fold_displacements(train, m, weight_fn, indices=zv.kept)
    values = np.sort(np.array([disp[j] for j in zv.kept]))
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return 0.0, 0
    t = float(finite[min(max(target_kept, 1), finite.size) - 1])
    kept = int(np.searchsorted(values, t, side="right"))
    above = finite[finite > t]
    if above.size:
        t = float((t + above[0]) / 2)
    return t, kept


def apply_filter(ds: Dataset, f: FeatureFilter) -> Dataset:
    if ds.r != f.r_raw:
        raise InvalidArgumentError(f"dataset has r={ds.r} columns, filter expects {f.r_raw}")
    kept = np.array(f.kept, dtype=np.int64)
    return ds.with_rssi(ds.rssi[:, kept], columns=ds.columns[kept])


def filter_rssi(rssi, f: FeatureFilter) -> np.ndarray:
    rssi = np.asarray(rssi, dtype=np.float64)
    if rssi.shape[-1] != f.r_raw:
        raise InvalidArgumentError(f"expected {f.r_raw} RSSI values, got {rssi.shape[-1]}")
    return rssi[..., list(f.kept)]


def save_ap_locations(estimates, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ap_index", "longitude", "latitude", "support"])
        for e in estimates:
            w.writerow([e.ap_index, repr(e.position[0]), repr(e.position[1]), e.support])


def load_ap_locations(path) -> list[ApLocationEstimate]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ApLocationEstimate(int(row["ap_index"]), (float(row["longitude"]), float(row["latitude"])), int(row["support"]))
            for row in csv.DictReader(fh)
        ]


class RssiFilter(TransformerMixin, BaseEstimator):
    """Recode non-detections and drop uninformative APs.

    ``fit`` needs the training locations (``y`` columns longitude, latitude)
    and collection timestamps for the stability pass; ``X_val`` enables the
    validation half of the zero-variance rule.
    """

    def __init__(self, m_folds=2, distance_threshold=30.0, weight_gamma=1.0):
        self.m_folds = m_folds
        self.distance_threshold = distance_threshold
        self.weight_gamma = weight_gamma

    def fit(self, X, y, timestamp=None, X_val=None):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if y.shape[0] != X.shape[0] or y.shape[1] < 2:
            raise InvalidArgumentError("y must have one row per sample and at least longitude, latitude columns")
        n = X.shape[0]
        train = Dataset.from_arrays(
            recode_rssi(X), y[:, 0], y[:, 1], np.zeros(n, dtype=int), np.zeros(n, dtype=int), timestamp=timestamp
        )
        if X_val is None:
            val = train
        else:
            X_val = check_array(X_val, dtype=np.float64)
            k = X_val.shape[0]
            zeros = np.zeros(k)
            val = Dataset.from_arrays(recode_rssi(X_val), zeros, zeros, zeros.astype(int), zeros.astype(int),
                                      role="validation")
        self.filter_ = build_filter(train, val, self.m_folds, self.distance_threshold,
                                    make_weight_fn(self.weight_gamma))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "filter_")
        X = check_array(X, dtype=np.float64)
        return filter_rssi(recode_rssi(X), self.filter_)

    def get_support(self, indices=False):
        check_is_fitted(self, "filter_")
        if indices:
            return np.array(self.filter_.kept)
        mask = np.zeros(self.filter_.r_raw, dtype=bool)
        mask[list(self.filter_.kept)] = True
        return mask

"""End-to-end localizers: global (tnn), building-split (tsnn) and full sequential (scnn)."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from seqloc import __version__
from seqloc.dataset import NONDETECT, Dataset
from seqloc.exceptions import InvalidArgumentError, SeqlocError
from seqloc.neuralnet import MlpModel, NetConfig, forward
from seqloc.preprocess import (
    FeatureFilter,
    apply_filter,
    build_filter,
    filter_rssi,
    make_weight_fn,
    recode_nondetect,
    recode_rssi,
)
from seqloc.tree import (
    PartitionNode,
    StoppingRule,
    build_tree,
    derive_seed,
    route_batch,
    tree_from_dict,
    tree_to_json,
)

VARIANTS = ("tnn", "tsnn", "scnn")
LOW_CONFIDENCE_DETECTIONS = 3


@dataclass(frozen=True)
class PipelineConfig:
    m_folds: int = 2
    stability_threshold_m: float = 30.0
    weight_gamma: float = 1.0
    stopping: StoppingRule = field(default_factory=StoppingRule)
    net: NetConfig = field(default_factory=NetConfig)
    spatial_clustering: bool = False
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"]["classifier_hidden"] = list(self.net.classifier_hidden)
        d["net"]["regressor_hidden"] = list(self.net.regressor_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        stopping = StoppingRule(**d.pop("stopping", {}))
        net = dict(d.pop("net", {}))
        for key in ("classifier_hidden", "regressor_hidden"):
            if key in net:
                net[key] = tuple(int(h) for h in net[key])
        return cls(stopping=stopping, net=NetConfig(**net), **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Prediction:
    longitude: float
    latitude: float
    floor: int
    building: int
    leaf: str = ""
    low_confidence: bool = False
    floor_clamped: bool = False


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.rssi, ds.longitude, ds.latitude, ds.floor, ds.building, ds.timestamp):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class FitError(SeqlocError):
    def __init__(self, stage: str, cause: Exception, manifest: dict):
        super().__init__(f"fit failed during {stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest = manifest


class Predictor:
    """A fitted localizer: feature filter, partition tree and provenance manifest."""

    def __init__(self, variant: str, filter: FeatureFilter, tree: PartitionNode, manifest: dict | None = None):
        if variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.filter = filter
        self.tree = tree
        self.manifest = manifest or {}

    @property
    def r_raw(self) -> int:
        return self.filter.r_raw

    def leaves(self):
        return self.tree.leaves()

    def predict_batch(self, X) -> list[Prediction]:
        """Predictions for raw RSSI rows (sentinel 100 or -105 for non-detection)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.r_raw:
            raise InvalidArgumentError(f"expected {self.r_raw} RSSI values per row, got {X.shape[1]}")
        Xf = filter_rssi(recode_rssi(X), self.filter)
        leaves = route_batch(self.tree, Xf)
        out: list = [None] * X.shape[0]
        groups: dict[int, list[int]] = {}
        by_id = {}
        for i, leaf in enumerate(leaves):
            groups.setdefault(id(leaf), []).append(i)
            by_id[id(leaf)] = leaf
        for key, idx in groups.items():
            leaf = by_id[key]
            idx = np.array(idx)
            for i, p in zip(idx, _leaf_predict(leaf, Xf[idx])):
                out[i] = p
        return out

    def predict(self, x) -> Prediction:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgumentError("predict expects a single RSSI vector; use predict_batch for rows")
        return self.predict_batch(x[None, :])[0]

    # -- persistence --

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "models").mkdir(parents=True, exist_ok=True)
        skeleton, models = tree_to_json(self.tree)
        (d / "tree.json").write_text(skeleton, encoding="utf-8")
        (d / "filter.json").write_text(self.filter.to_json(), encoding="utf-8")
        for h, model in sorted(models.items()):
            (d / "models" / f"{h}.json").write_text(model.to_json(), encoding="utf-8")
        manifest = dict(self.manifest, variant=self.variant)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Predictor":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        filt = FeatureFilter.from_json((d / "filter.json").read_text(encoding="utf-8"))
        models = {
            p.stem: MlpModel.from_json(p.read_text(encoding="utf-8")) for p in sorted((d / "models").glob("*.json"))
        }
        tree = tree_from_dict(json.loads((d / "tree.json").read_text(encoding="utf-8")), models)
        return cls(manifest["variant"], filt, tree, manifest)


def _leaf_predict(leaf: PartitionNode, X: np.ndarray) -> list[Prediction]:
    coords = forward(leaf.regressor, X)
    n = X.shape[0]

    if leaf.floor_classifier is None:
        floors = np.full(n, leaf.floor_classes[0])
        clamped = np.zeros(n, dtype=bool)
    else:
        proba = forward(leaf.floor_classifier, X)
        classes = np.array(leaf.floor_classes)
        admissible = np.isin(classes, leaf.admissible_floors)
        free = classes[np.argmax(proba, axis=1)]
        floors = classes[np.argmax(np.where(admissible, proba, -np.inf), axis=1)]
        clamped = free != floors

    region_b = sorted(leaf.region.buildings & set(leaf.building_classes)) if leaf.building_classes else []
    if len(region_b) == 1:
        buildings = np.full(n, region_b[0])
    elif leaf.building_classifier is None:
        buildings = np.full(n, leaf.building_classes[0])
    else:
        buildings = np.array(leaf.building_classes)[np.argmax(forward(leaf.building_classifier, X), axis=1)]

    detected = (X > NONDETECT).sum(axis=1)
    desc = leaf.descriptor
    return [
        Prediction(float(coords[i, 0]), float(coords[i, 1]), int(floors[i]), int(buildings[i]), desc,
                   bool(detected[i] < LOW_CONFIDENCE_DETECTIONS), bool(clamped[i]))
        for i in range(n)
    ]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def fit(variant: str, train: Dataset, validation: Dataset, config: PipelineConfig | None = None) -> Predictor:
    """Recode, filter, grow the tree for ``variant`` and fit its leaves."""
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    config = config or PipelineConfig()
    manifest = {
        "variant": variant,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "train_sha256": dataset_digest(train),
        "validation_sha256": dataset_digest(validation),
        "started": _now(),
    }
    if variant == "tnn":
        manifest["extensions"] = ["building head trained on the global sample for building hit rate"]

    stage = "recode"
    try:
        tr, va = recode_nondetect(train), recode_nondetect(validation)
        stage = "filter"
        filt = build_filter(tr, va, config.m_folds, config.stability_threshold_m, make_weight_fn(config.weight_gamma))
        manifest["kept_features"] = len(filt.kept)
        manifest["dropped"] = filt.histogram()
        tr, va = apply_filter(tr, filt), apply_filter(va, filt)
        stage = "tree"
        rule = config.stopping
        kwargs = dict(net=config.net, seed=derive_seed(config.seed, variant), threads=config.threads,
                      spatial_clustering=config.spatial_clustering)
        if variant == "tnn":
            tree = build_tree(tr, va, StoppingRule(rule.min_subsample, rule.min_accuracy, 0), enforce_rule=False,
                              **kwargs)
        elif variant == "tsnn":
            tree = build_tree(tr, va, rule, kinds=("building",), enforce_rule=False, **kwargs)
        else:
            tree = build_tree(tr, va, rule, **kwargs)
    except Exception as exc:
        manifest["failed_stage"] = stage
        manifest["finished"] = _now()
        raise FitError(stage, exc, manifest) from exc

    manifest["nodes"] = [
        {"path": n.path, "region": n.descriptor, "split": n.split, "accuracy": n.accuracy,
         "candidates": [[d, t] for d, t in n.candidates]}
        for n in tree.internal_nodes()
    ]
    manifest["leaves"] = [{"path": l.path, "region": l.descriptor, "n_train": l.n_train} for l in tree.leaves()]
    manifest["finished"] = _now()
    return Predictor(variant, filt, tree, manifest)


# -- KNN reference ------------------------------------------------------------------

def _vote(values: np.ndarray) -> int:
    """Majority vote over neighbours sorted nearest first; ties go to the value seen first."""
    uniq, counts = np.unique(values, return_counts=True)
    top = set(uniq[counts == counts.max()].tolist())
    for v in values:
        if v in top:
            return int(v)
    raise AssertionError("unreachable")


def knn_predict_batch(train: Dataset, X, k: int = 1) -> list[Prediction]:
    """Euclidean k-nearest neighbours in recoded RSSI space.

    Coordinates are the neighbour mean; floor and building are majority
    votes with ties resolved toward the nearer neighbour. Distance ties are
    broken by training row order.
    """
    if not 1 <= k <= train.n:
        raise InvalidArgumentError(f"k must be in [1, {train.n}], got {k}")
    T = recode_rssi(train.rssi)
    X = recode_rssi(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != T.shape[1]:
        raise InvalidArgumentError(f"expected {T.shape[1]} RSSI values, got {X.shape[1]}")
    sq = (X * X).sum(axis=1)[:, None] - 2 * X @ T.T + (T * T).sum(axis=1)[None, :]
    out = []
    for i in range(X.shape[0]):
        d = np.maximum(sq[i], 0.0)
        nn = np.argsort(d, kind="stable")[:k]
        out.append(
            Prediction(
                float(train.longitude[nn].mean()),
                float(train.latitude[nn].mean()),
                _vote(train.floor[nn]),
                _vote(train.building[nn]),
                leaf=f"knn k={k}",
                low_confidence=bool((X[i] > NONDETECT).sum() < LOW_CONFIDENCE_DETECTIONS),
            )
        )
    return out


def knn_baseline(train: Dataset, x, k: int = 1) -> Prediction:
    return knn_predict_batch(train, np.asarray(x, dtype=np.float64)[None, :], k)[0]


# -- batch IO -----------------------------------------------------------------------

PREDICTION_COLUMNS = ("row", "longitude", "latitude", "floor", "building", "leaf", "low_confidence")


def write_predictions(predictions, path_or_stream) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for i, p in enumerate(predictions):
            w.writerow([i, repr(p.longitude), repr(p.latitude), p.floor, p.building, p.leaf, int(p.low_confidence)])

    if isinstance(path_or_stream, (str, os.PathLike)):
        with open(path_or_stream, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
    else:
        emit(path_or_stream)

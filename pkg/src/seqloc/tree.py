"""Sequential binary classification over the location space.

The tree splits *locations*, not RSSI features. Each internal node holds a
classifier that sends a fingerprint to one of two sub-regions; each leaf holds
networks trained on the observations of a slightly enlarged neighbourhood of
its region.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from seqloc.dataset import N_BUILDINGS, Dataset, LocationLabel
from seqloc.exceptions import EvaluationError, InvalidArgumentError, LeafFitError, PartitionViolationError
from seqloc.neuralnet import (
    MlpModel,
    NetConfig,
    accuracy,
    classifier_layers,
    one_hot,
    predict_class,
    regressor_layers,
)
from seqloc.neuralnet import train as train_network

log = logging.getLogger(__name__)

SPLIT_KINDS = ("building", "floor", "hyperplane")


def derive_seed(base: int, *keys) -> int:
    """Stable per-model seed from a base seed and string keys."""
    words = [int(base) & 0xFFFFFFFF] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# -- regions -----------------------------------------------------------------

@dataclass(frozen=True)
class BuildingIn:
    buildings: frozenset

    def mask(self, lon, lat, floor, building):
        return np.isin(building, sorted(self.buildings))

    def describe(self):
        return "building in {" + ",".join(str(b) for b in sorted(self.buildings)) + "}"

    def to_dict(self):
        return {"type": "building_in", "buildings": sorted(self.buildings)}


@dataclass(frozen=True)
class FloorAtMost:
    floor: int

    def mask(self, lon, lat, floor, building):
        return floor <= self.floor

    def describe(self):
        return f"floor <= {self.floor}"

    def to_dict(self):
        return {"type": "floor_at_most", "floor": self.floor}


@dataclass(frozen=True)
class FloorAtLeast:
    floor: int

    def mask(self, lon, lat, floor, building):
        return floor >= self.floor

    def describe(self):
        return f"floor >= {self.floor}"

    def to_dict(self):
        return {"type": "floor_at_least", "floor": self.floor}


@dataclass(frozen=True)
class HalfPlane:
    """``a * lon + b * lat <= c`` (``<`` when strict)."""

    a: float
    b: float
    c: float
    strict: bool = False

    def mask(self, lon, lat, floor, building):
        v = self.a * lon + self.b * lat
        return v < self.c if self.strict else v <= self.c

    def complement(self) -> "HalfPlane":
        return HalfPlane(-self.a, -self.b, -self.c, not self.strict)

    def describe(self):
        for name, coef, other in (("lon", self.a, self.b), ("lat", self.b, self.a)):
            if other == 0 and coef != 0:
                flip = coef < 0
                op = {(False, False): "<=", (False, True): "<", (True, False): ">=", (True, True): ">"}[flip, self.strict]
                return f"{name} {op} {self.c / coef:.6g}"
        op = "<" if self.strict else "<="
        return f"{self.a:.6g}*lon + {self.b:.6g}*lat {op} {self.c:.6g}"

    def to_dict(self):
        return {"type": "half_plane", "a": self.a, "b": self.b, "c": self.c, "strict": self.strict}


def constraint_from_dict(d):
    kind = d["type"]
    if kind == "building_in":
        return BuildingIn(frozenset(int(b) for b in d["buildings"]))
    if kind == "floor_at_most":
        return FloorAtMost(int(d["floor"]))
    if kind == "floor_at_least":
        return FloorAtLeast(int(d["floor"]))
    if kind == "half_plane":
        return HalfPlane(float(d["a"]), float(d["b"]), float(d["c"]), bool(d["strict"]))
    raise InvalidArgumentError(f"unknown constraint type {kind!r}")


@dataclass(frozen=True)
class Region:
    """Conjunction of atomic constraints; the empty conjunction is the whole space."""

    constraints: tuple = ()

    @classmethod
    def root(cls) -> "Region":
        return cls(())

    def __and__(self, c) -> "Region":
        kept, merged = [], c
        for old in self.constraints:
            if isinstance(old, BuildingIn) and isinstance(merged, BuildingIn):
                merged = BuildingIn(old.buildings & merged.buildings)
            elif isinstance(old, FloorAtMost) and isinstance(merged, FloorAtMost):
                merged = FloorAtMost(min(old.floor, merged.floor))
            elif isinstance(old, FloorAtLeast) and isinstance(merged, FloorAtLeast):
                merged = FloorAtLeast(max(old.floor, merged.floor))
            else:
                kept.append(old)
        return Region(tuple(kept) + (merged,))

    def mask_arrays(self, lon, lat, floor, building) -> np.ndarray:
        m = np.ones(np.shape(lon), dtype=bool)
        for c in self.constraints:
            m &= c.mask(lon, lat, floor, building)
        return m

    def mask(self, ds: Dataset) -> np.ndarray:
        return self.mask_arrays(ds.longitude, ds.latitude, ds.floor, ds.building)

    def contains(self, label: LocationLabel) -> bool:
        return bool(self.mask_arrays(np.array([label.longitude]), np.array([label.latitude]),
                                     np.array([label.floor]), np.array([label.building]))[0])

    @property
    def buildings(self) -> frozenset:
        allowed = frozenset(range(N_BUILDINGS))
        for c in self.constraints:
            if isinstance(c, BuildingIn):
                allowed &= c.buildings
        return allowed

    def describe(self) -> str:
        return " & ".join(c.describe() for c in self.constraints) or "all"

    def to_list(self) -> list:
        return [c.to_dict() for c in self.constraints]

    @classmethod
    def from_list(cls, items) -> "Region":
        return cls(tuple(constraint_from_dict(d) for d in items))


def expand_region(region: Region) -> Region:
    """Relax every floor constraint by one floor; other constraints are kept."""
    out = []
    for c in region.constraints:
        if isinstance(c, FloorAtMost):
            out.append(FloorAtMost(c.floor + 1))
        elif isinstance(c, FloorAtLeast):
            out.append(FloorAtLeast(max(c.floor - 1, 0)))
        else:
            out.append(c)
    return Region(tuple(out))


@dataclass(frozen=True)
class SplitCandidate:
    parent: Region
    left: Region
    right: Region
    descriptor: str
    kind: str


@dataclass(frozen=True)
class StoppingRule:
    min_subsample: int = 800
    min_accuracy: float = 0.98
    max_depth: int = 6

    def __post_init__(self):
        if self.min_subsample < 1:
            raise InvalidArgumentError("min_subsample must be >= 1")
        if not 0 < self.min_accuracy:
            raise InvalidArgumentError("min_accuracy must be > 0")
        if self.max_depth < 0:
            raise InvalidArgumentError("max_depth must be >= 0")


# -- splitting -----------------------------------------------------------------

def label_by_region(ds: Dataset, split: SplitCandidate) -> np.ndarray:
    """``Z = 1`` for observations in the right region, 0 for the left one."""
    left, right = split.left.mask(ds), split.right.mask(ds)
    bad = left == right
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        where = "both regions" if left[i] else "neither region"
        raise PartitionViolationError(f"observation {i} ({ds.label(i)}) lies in {where} of split {split.descriptor!r}")
    return right.astype(np.int64)


def _two_means(coords: np.ndarray, iters: int = 50):
    """Deterministic 2-means on planar coordinates, seeded at the extremes of the major axis."""
    centered = coords - coords.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[0]
    centers = np.array([coords[np.argmin(proj)], coords[np.argmax(proj)]], dtype=np.float64)
    for _ in range(iters):
        d = ((coords[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = np.argmin(d, axis=1)
        if assign.min() == assign.max():
            break
        new = np.array([coords[assign == k].mean(axis=0) for k in (0, 1)])
        if np.allclose(new, centers):
            break
        centers = new
    return centers


def propose_splits(region: Region, train: Dataset, kinds=SPLIT_KINDS, spatial_clustering: bool = False):
    """Natural candidate partitions of ``region``, deduplicated by the labelling they induce.

    Order: building splits, floor thresholds, median hyperplanes on longitude
    then latitude, then (optionally) the 2-means bisector.
    """
    sub = train.subset(region.mask(train))
    if sub.n < 2:
        return []
    labels = np.column_stack([sub.longitude, sub.latitude, sub.floor, sub.building])
    if np.all(labels == labels[0]):
        return []

    raw = []
    if "building" in kinds:
        present = sorted(set(sub.building.tolist()))
        allowed = region.buildings
        if len(present) >= 2:
            for b in present:
                rest = allowed - {b}
                raw.append((region & BuildingIn(frozenset({b})), region & BuildingIn(rest),
                            f"building {{{b}}} vs {{{','.join(map(str, sorted(rest)))}}}", "building"))
    if "floor" in kinds:
        floors = sorted(set(sub.floor.tolist()))
        for c in floors[:-1]:
            raw.append((region & FloorAtMost(c), region & FloorAtLeast(c + 1),
                        f"floor <= {c} vs floor >= {c + 1}", "floor"))
    if "hyperplane" in kinds:
        for name, a, b, values in (("lon", 1.0, 0.0, sub.longitude), ("lat", 0.0, 1.0, sub.latitude)):
            med = float(np.median(values))
            hp = HalfPlane(a, b, med)
            raw.append((region & hp, region & hp.complement(), f"{name} <= {med:.6g} vs {name} > {med:.6g}",
                        "hyperplane"))
        if spatial_clustering:
            c0, c1 = _two_means(sub.coords)
            w = c1 - c0
            if np.any(w != 0):
                mid = float(w @ (c0 + c1) / 2)
                hp = HalfPlane(float(w[0]), float(w[1]), mid)
                raw.append((region & hp, region & hp.complement(), f"2-means bisector ({hp.describe()})",
                            "hyperplane"))

    seen, out = set(), []
    for left, right, desc, kind in raw:
        z = right.mask(sub)
        if z.all() or not z.any():
            continue
        key = z.tobytes()
        if key in seen or (~z).tobytes() in seen:
            continue
        seen.add(key)
        out.append(SplitCandidate(region, left, right, desc, kind))
    return out


def evaluate_split(split: SplitCandidate, train: Dataset, validation: Dataset, net: NetConfig, seed: int = 0):
    """Train the binary classifier for ``split`` and score it on the validation subsample.

    Returns ``(classifier, tau)`` where ``tau`` is the fraction of validation
    observations in the parent region whose side is predicted correctly.
    """
    tr = train.subset(split.parent.mask(train))
    va = validation.subset(split.parent.mask(validation))
    if tr.n == 0:
        raise EvaluationError(f"split {split.descriptor!r}: no training observations in the parent region")
    if va.n == 0:
        raise EvaluationError(f"split {split.descriptor!r}: no validation observations in the parent region")
    z_tr = label_by_region(tr, split)
    z_va = label_by_region(va, split)
    cfg = net.classifier_cfg(seed)
    clf = train_network((tr.rssi, one_hot(z_tr, 2)), cfg, classifier_layers(2, net.classifier_hidden),
                validation=(va.rssi, one_hot(z_va, 2)))
    return clf, accuracy(clf, va.rssi, z_va)


# -- nodes -----------------------------------------------------------------------

@dataclass(eq=False)
class PartitionNode:
    region: Region
    path: str = "r"
    depth: int = 0
    # internal nodes
    split: str | None = None
    classifier: MlpModel | None = None
    accuracy: float | None = None
    left: "PartitionNode | None" = None
    right: "PartitionNode | None" = None
    candidates: list = field(default_factory=list)
    # leaves
    training_region: Region | None = None
    regressor: MlpModel | None = None
    floor_classifier: MlpModel | None = None
    floor_classes: tuple = ()
    admissible_floors: tuple = ()
    building_classifier: MlpModel | None = None
    building_classes: tuple = ()
    n_train: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.classifier is None

    @property
    def descriptor(self) -> str:
        return self.region.describe()

    def leaves(self) -> list["PartitionNode"]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def internal_nodes(self) -> list["PartitionNode"]:
        if self.is_leaf:
            return []
        return [self] + self.left.internal_nodes() + self.right.internal_nodes()

    def nodes(self) -> list["PartitionNode"]:
        if self.is_leaf:
            return [self]
        return [self] + self.left.nodes() + self.right.nodes()

    @property
    def height(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.height, self.right.height)


def fit_leaf(leaf_region: Region, train: Dataset, net: NetConfig, validation: Dataset | None = None,
             seed: int = 0) -> PartitionNode:
    """Train the coordinate regressor and floor (and, if needed, building) classifiers of a leaf.

    All heads use the observations of the expanded region. The admissible
    floors are those seen in the leaf's own region.
    """
    training_region = expand_region(leaf_region)
    sub = train.subset(training_region.mask(train))
    if sub.n == 0:
        raise LeafFitError(f"no training observations in {training_region.describe()}")
    va = None
    if validation is not None:
        va = validation.subset(training_region.mask(validation))
        if va.n == 0:
            va = None

    node = PartitionNode(region=leaf_region, training_region=training_region, n_train=sub.n)
    reg_val = None if va is None else (va.rssi, va.coords)
    node.regressor = train_network((sub.rssi, sub.coords), net.regressor_cfg(derive_seed(seed, "regressor")),
                           regressor_layers(2, net.regressor_hidden), validation=reg_val)

    node.floor_classes = tuple(sorted(set(sub.floor.tolist())))
    node.floor_classifier = _fit_label_head(sub, va, "floor", node.floor_classes, net, derive_seed(seed, "floor"))

    own = train.floor[leaf_region.mask(train)]
    node.admissible_floors = tuple(sorted(set(own.tolist()))) or node.floor_classes

    node.building_classes = tuple(sorted(set(sub.building.tolist())))
    node.building_classifier = _fit_label_head(sub, va, "building", node.building_classes, net,
                                               derive_seed(seed, "building"))
    return node


def _fit_label_head(sub: Dataset, va, attr: str, classes: tuple, net: NetConfig, seed: int):
    if len(classes) < 2:
        return None
    lookup = {c: k for k, c in enumerate(classes)}
    y = one_hot([lookup[v] for v in getattr(sub, attr)], len(classes))
    val = None
    if va is not None:
        keep = np.isin(getattr(va, attr), classes)
        if keep.any():
            val = (va.rssi[keep], one_hot([lookup[v] for v in getattr(va, attr)[keep]], len(classes)))
    return train_network((sub.rssi, y), net.classifier_cfg(seed), classifier_layers(len(classes), net.classifier_hidden),
                 validation=val)


# -- building -----------------------------------------------------------------

def _child_sizes(split: SplitCandidate, train: Dataset) -> tuple[int, int]:
    return int(split.left.mask(train).sum()), int(split.right.mask(train).sum())


def build_tree(train: Dataset, validation: Dataset, rule: StoppingRule | None = None, net: NetConfig | None = None,
               *, kinds=SPLIT_KINDS, enforce_rule: bool = True, spatial_clustering: bool = False,
               seed: int = 0, threads: int = 1, fit_leaves: bool = True) -> PartitionNode:
    """Grow the partition tree breadth-first, then fit every leaf.

    At each open node all candidate partitions are scored and the one with
    the highest validation accuracy is kept (ties go to the earlier
    candidate). The node stays a leaf when no candidate remains, when the
    best accuracy is below ``rule.min_accuracy``, or when the depth limit is
    reached. Candidates whose smaller child would hold fewer than
    ``rule.min_subsample`` training observations are discarded before
    scoring. With ``enforce_rule=False`` only the depth limit and the supply
    of candidates stop the growth.
    """
    rule = rule or StoppingRule()
    net = net or NetConfig()
    root = PartitionNode(region=Region.root())
    if enforce_rule and train.n < rule.min_subsample:
        log.warning("training set has %d observations, below min_subsample=%d; returning a single leaf",
                    train.n, rule.min_subsample)
        queue = deque()
    else:
        queue = deque([root])

    while queue:
        node = queue.popleft()
        if node.depth >= rule.max_depth:
            continue
        cands = propose_splits(node.region, train, kinds, spatial_clustering)
        if enforce_rule:
            cands = [c for c in cands if min(_child_sizes(c, train)) >= rule.min_subsample]
        if not cands:
            continue

        def score(item):
            k, cand = item
            try:
                return evaluate_split(cand, train, validation, net, derive_seed(seed, node.path, k, cand.descriptor))
            except EvaluationError as exc:
                log.warning("%s", exc)
                return None, float("nan")

        items = list(enumerate(cands))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(score, items))
        else:
            results = [score(it) for it in items]

        taus = np.array([t for _, t in results], dtype=np.float64)
        node.candidates = [(c.descriptor, float(t)) for c, t in zip(cands, taus)]
        for c, t in zip(cands, taus):
            log.info("node %s [%s]: candidate %s tau=%.4f", node.path, node.descriptor, c.descriptor, t)
        best = int(np.argmax(np.where(np.isnan(taus), -np.inf, taus)))
        tau = float(taus[best])
        if np.isnan(tau):
            log.warning("node %s stays a leaf: no candidate could be scored", node.path)
            continue
        if enforce_rule and not tau >= rule.min_accuracy:
            log.info("node %s stops: best tau %.4f below %.4f", node.path, tau, rule.min_accuracy)
            continue

        chosen = cands[best]
        label_by_region(train.subset(chosen.parent.mask(train)), chosen)
        node.split = chosen.descriptor
        node.classifier, node.accuracy = results[best][0], tau
        node.left = PartitionNode(region=chosen.left, path=node.path + "0", depth=node.depth + 1)
        node.right = PartitionNode(region=chosen.right, path=node.path + "1", depth=node.depth + 1)
        log.info("node %s splits on %s (tau=%.4f)", node.path, chosen.descriptor, tau)
        queue.extend([node.left, node.right])

    if fit_leaves:
        fit_all_leaves(root, train, validation, net, seed)
    return root


def fit_all_leaves(root: PartitionNode, train: Dataset, validation: Dataset | None, net: NetConfig, seed: int = 0):
    for leaf in root.leaves():
        fitted = fit_leaf(leaf.region, train, net, validation, derive_seed(seed, leaf.path, "leaf"))
        for name in ("training_region", "regressor", "floor_classifier", "floor_classes", "admissible_floors",
                     "building_classifier", "building_classes", "n_train"):
            setattr(leaf, name, getattr(fitted, name))


# -- routing -----------------------------------------------------------------

def descend(tree: PartitionNode, x) -> PartitionNode:
    """Route one (filtered, recoded) RSSI vector to its leaf."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError("descend expects a single RSSI vector")
    node = tree
    while not node.is_leaf:
        if x.shape[0] != node.classifier.n_inputs:
            raise InvalidArgumentError(f"expected {node.classifier.n_inputs} RSSI values, got {x.shape[0]}")
        node = node.right if _route(node, x[None, :])[0] else node.left
    return node


def _route(node: PartitionNode, X: np.ndarray) -> np.ndarray:
    return np.asarray(predict_class(node.classifier, X)).reshape(-1)


def route_batch(tree: PartitionNode, X) -> list[PartitionNode]:
    """Leaf for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out: list = [None] * X.shape[0]

    def walk(node, idx):
        if idx.size == 0:
            return
        if node.is_leaf:
            for i in idx:
                out[i] = node
            return
        if X.shape[1] != node.classifier.n_inputs:
            raise InvalidArgumentError(f"expected {node.classifier.n_inputs} RSSI values, got {X.shape[1]}")
        side = _route(node, X[idx])
        walk(node.left, idx[side == 0])
        walk(node.right, idx[side == 1])

    walk(tree, np.arange(X.shape[0]))
    return out


# -- persistence -----------------------------------------------------------------

def model_hash(model: MlpModel) -> str:
    return hashlib.sha256(model.to_json().encode()).hexdigest()


def tree_to_dict(tree: PartitionNode, models: dict) -> dict:
    """Skeleton of ``tree``; networks are replaced by content hashes and collected in ``models``."""

    def ref(model):
        if model is None:
            return None
        h = model_hash(model)
        models[h] = model
        return h

    def node_dict(node):
        d = {
            "path": node.path,
            "depth": node.depth,
            "region": node.region.to_list(),
            "descriptor": node.descriptor,
        }
        if node.is_leaf:
            d.update(
                kind="leaf",
                training_region=node.training_region.to_list() if node.training_region else None,
                regressor=ref(node.regressor),
                floor_classifier=ref(node.floor_classifier),
                floor_classes=list(node.floor_classes),
                admissible_floors=list(node.admissible_floors),
                building_classifier=ref(node.building_classifier),
                building_classes=list(node.building_classes),
                n_train=node.n_train,
            )
        else:
            d.update(
                kind="internal",
                split=node.split,
                accuracy=node.accuracy,
                classifier=ref(node.classifier),
                candidates=[[desc, tau] for desc, tau in node.candidates],
                left=node_dict(node.left),
                right=node_dict(node.right),
            )
        return d

    return node_dict(tree)


def tree_from_dict(d: dict, models: dict) -> PartitionNode:
    def get(h):
        return None if h is None else models[h]

    node = PartitionNode(region=Region.from_list(d["region"]), path=d["path"], depth=d["depth"])
    if d["kind"] == "leaf":
        node.training_region = Region.from_list(d["training_region"]) if d["training_region"] is not None else None
        node.regressor = get(d["regressor"])
        node.floor_classifier = get(d["floor_classifier"])
        node.floor_classes = tuple(d["floor_classes"])
        node.admissible_floors = tuple(d["admissible_floors"])
        node.building_classifier = get(d["building_classifier"])
        node.building_classes = tuple(d["building_classes"])
        node.n_train = d["n_train"]
    else:
        node.split = d["split"]
        node.accuracy = d["accuracy"]
        node.classifier = get(d["classifier"])
        node.candidates = [(desc, tau) for desc, tau in d.get("candidates", [])]
        node.left = tree_from_dict(d["left"], models)
        node.right = tree_from_dict(d["right"], models)
    return node


def tree_to_json(tree: PartitionNode) -> tuple[str, dict]:
    models: dict = {}
    skeleton = tree_to_dict(tree, models)
    return json.dumps(skeleton, indent=1, sort_keys=True), models

"""Acceptance criteria, one test per criterion.

Criteria 1 to 6 need the UJIIndoorLoc files: point ``UJIINDOORLOC_DIR`` at a
directory holding ``trainingData.csv`` and ``validationData.csv``. Without
them those criteria are reported as FAIL with the reason. Criteria 7 and 8
run on generated data only.

Run ``pytest tests/test_acceptance.py -v`` (or add ``-s`` to see each line as
it is produced); the PASS/FAIL lines are repeated in the terminal summary.
"""
import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqloc.dataset import NONDETECT, LocationLabel, parse_csv
from seqloc.metrics import evaluate, evaluate_predictions, positioning_error
from seqloc.neuralnet import (
    NetConfig,
    classifier_layers,
    forward,
    gradient_check,
    init_model,
    one_hot,
    regressor_layers,
    train,
)
from seqloc.pipeline import PipelineConfig, Prediction, fit, knn_predict_batch
from seqloc.preprocess import (
    build_filter,
    calibrate_threshold,
    estimate_ap_location,
    recode_nondetect,
    recode_rssi,
    zero_variance_filter,
)
from seqloc.synth import default_scene, generate
from seqloc.tree import StoppingRule, build_tree, route_batch

from conftest import FAST_NET, make_dataset

DATA_ENV = "UJIINDOORLOC_DIR"
ALT_SEEDS = (1, 2, 3, 4, 5)


# -- canonical data ------------------------------------------------------------------

def _canonical_paths():
    root = os.environ.get(DATA_ENV)
    if not root:
        return None, f"{DATA_ENV} is not set; the UJIIndoorLoc files are needed for this criterion"
    paths = Path(root) / "trainingData.csv", Path(root) / "validationData.csv"
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        return None, f"missing {', '.join(missing)}"
    return paths, ""


@pytest.fixture(scope="session")
def canonical():
    paths, why = _canonical_paths()
    if paths is None:
        return None, why
    return (parse_csv(paths[0], "train"), parse_csv(paths[1], "validation"), paths), ""


@pytest.fixture(scope="session")
def canonical_fits(canonical):
    """Lazily fitted predictors keyed by (variant, seed), shared by criteria 1 to 5."""
    cache = {}

    def get(variant, seed=0):
        data, _ = canonical
        key = (variant, seed)
        if key not in cache:
            train_ds, val_ds, _ = data
            cfg = PipelineConfig(seed=seed, threads=os.cpu_count() or 1)
            cache[key] = fit(variant, train_ds, val_ds, cfg)
        return cache[key]

    return get


def _need_canonical(canonical, record, criterion, title):
    data, why = canonical
    if data is None:
        record(criterion, title, False, why)
        pytest.fail(f"criterion {criterion} cannot be checked: {why}")
    return data


def _report(fits, variant, seed, val):
    return evaluate(fits(variant, seed), val)


def test_criterion_1_building_hit_rate(canonical, canonical_fits, acceptance_log):
    title = "building hit rate"
    _, val, _ = _need_canonical(canonical, acceptance_log, 1, title)
    rates = {v: _report(canonical_fits, v, 0, val).building_hit_rate for v in ("scnn", "tsnn")}
    ok = val.n == 1111 and all(r == 1.0 for r in rates.values())
    acceptance_log(1, title, ok, f"n={val.n}, SCNN {rates['scnn']:.4%}, TSNN {rates['tsnn']:.4%} (need 100%)")
    assert ok


def test_criterion_2_floor_hit_rate(canonical, canonical_fits, acceptance_log):
    title = "floor hit rate"
    _, val, _ = _need_canonical(canonical, acceptance_log, 2, title)
    scnn = _report(canonical_fits, "scnn", 0, val).floor_hit_rate
    tnn = _report(canonical_fits, "tnn", 0, val).floor_hit_rate
    ok = scnn >= 0.935 and tnn >= 0.885
    acceptance_log(2, title, ok, f"SCNN {scnn:.4%} (>= 93.5%), TNN {tnn:.4%} (>= 88.5%)")
    assert ok


def test_criterion_3_mean_error_and_ordering(canonical, canonical_fits, acceptance_log):
    title = "mean positioning error"
    _, val, _ = _need_canonical(canonical, acceptance_log, 3, title)

    def errors(seed):
        return {v: _report(canonical_fits, v, seed, val).mean_positioning_error for v in ("tnn", "tsnn", "scnn")}

    base = errors(0)
    ordered = lambda e: e["scnn"] <= e["tsnn"] <= e["tnn"]
    alt_ok = sum(ordered(errors(s)) for s in ALT_SEEDS)
    ok = base["scnn"] <= 11.0 and 10.5 <= base["tnn"] <= 14.5 and ordered(base) and alt_ok >= 3
    acceptance_log(3, title, ok,
                   f"SCNN {base['scnn']:.2f} m (<= 11.0), TSNN {base['tsnn']:.2f} m, TNN {base['tnn']:.2f} m "
                   f"(in [10.5, 14.5]); ordering on default seed {ordered(base)}, on {alt_ok}/5 alternate seeds")
    assert ok


def test_criterion_4_per_building_pattern(canonical, canonical_fits, acceptance_log):
    title = "per-building pattern"
    _, val, _ = _need_canonical(canonical, acceptance_log, 4, title)
    rep = _report(canonical_fits, "scnn", 0, val)
    counts = tuple(rep.per_building[b].count for b in (0, 1, 2))
    errs = {b: rep.per_building[b].mean_positioning_error for b in (0, 1, 2)}
    worst = max(errs, key=errs.get)
    ok = counts == (536, 307, 268) and worst == 1
    acceptance_log(4, title, ok, f"counts {counts} (need (536, 307, 268)); SCNN errors "
                                 + ", ".join(f"B{b} {e:.2f} m" for b, e in errs.items()) + f"; worst B{worst}")
    assert ok


def test_criterion_5_node_accuracies(canonical, canonical_fits, acceptance_log):
    title = "node accuracies"
    _need_canonical(canonical, acceptance_log, 5, title)
    tree = canonical_fits("scnn", 0).tree
    root_ok = tree.split is not None and tree.split.startswith("building") and tree.accuracy == 1.0
    floor_tau = {}
    for node in tree.internal_nodes():
        blds = node.region.buildings
        if len(blds) == 1 and node.split.startswith("floor"):
            b = next(iter(blds))
            floor_tau[b] = max(floor_tau.get(b, 0.0), node.accuracy)
    floors_ok = set(floor_tau) == {0, 1, 2} and all(t >= 0.98 for t in floor_tau.values())
    ok = root_ok and floors_ok
    acceptance_log(5, title, ok, f"root split {tree.split!r} tau={tree.accuracy}; floor splits per building "
                                 + (", ".join(f"B{b} tau={t:.4f}" for b, t in sorted(floor_tau.items())) or "none"))
    assert ok


def _column_scan_oracle(path):
    """Columns with two or more distinct raw values, from a plain single pass over the CSV text."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        r = sum(h.startswith("WAP") for h in header)
        first, varies, seen = [None] * r, [False] * r, False
        for row in reader:
            if not row:
                continue
            seen = True
            for j in range(r):
                if first[j] is None:
                    first[j] = row[j]
                elif row[j] != first[j]:
                    varies[j] = True
    return [j for j in range(r) if seen and varies[j]]


def test_criterion_6_preprocessing(canonical, acceptance_log):
    title = "preprocessing"
    train_ds, val_ds, paths = _need_canonical(canonical, acceptance_log, 6, title)
    tr, va = recode_nondetect(train_ds), recode_nondetect(val_ds)
    threshold, kept = calibrate_threshold(tr, va, target_kept=320)
    full = build_filter(tr, va, 2, threshold)
    oracle = sorted(set(_column_scan_oracle(paths[0])) & set(_column_scan_oracle(paths[1])))
    zv = list(zero_variance_filter(tr, va).kept)
    ok = kept == 320 and len(full.kept) == 320 and zv == oracle
    acceptance_log(6, title, ok, f"calibrated threshold {threshold:.3f} m keeps {len(full.kept)} (need 320); "
                                 f"zero-variance keeps {len(zv)}, column-scan oracle {len(oracle)}, "
                                 f"identical={zv == oracle}")
    assert ok


# -- property suite --------------------------------------------------------------------

def _default_architectures():
    """Every network shape the pipeline builds with the default settings on 320 features."""
    net = NetConfig()
    archs = [(f"classifier K={k}", classifier_layers(k, net.classifier_hidden), "cross_entropy", k)
             for k in (2, 3, 4, 5)]
    archs.append(("regressor", regressor_layers(2, net.regressor_hidden), "mean_squared_error", 2))
    return archs


def _grad_check_default_architectures(r=320):
    rng = np.random.default_rng(0)
    x = rng.integers(-104, 1, size=(4, r)).astype(float)
    x[rng.random((4, r)) < 0.7] = NONDETECT
    worst = {}
    for name, layers, loss, k in _default_architectures():
        if loss == "cross_entropy":
            y = one_hot(np.arange(4) % k, k)
            m = init_model(r, layers, seed=1, input_shift=np.full(r, -105.0), input_scale=np.full(r, 105.0))
        else:
            y = rng.normal(size=(4, 2)) * 50 + np.array([-7500.0, 4864900.0])
            m = init_model(r, layers, seed=1, input_shift=np.full(r, -105.0), input_scale=np.full(r, 105.0),
                           output_shift=y.mean(0), output_scale=y.std(0))
        worst[name] = gradient_check(m, (x, y), loss, epsilon=1e-5)
    return worst


def _softmax_normalization():
    net = NetConfig()
    worst = 0.0
    for k in (2, 3, 5):
        m = init_model(320, classifier_layers(k, net.classifier_hidden), seed=k,
                       input_shift=np.full(320, -105.0), input_scale=np.full(320, 105.0))
        x = np.random.default_rng(k).uniform(-105, 0, size=(500, 320))
        m.weights[-1] *= 30.0
        worst = max(worst, float(np.abs(forward(m, x).sum(axis=1) - 1.0).max()))
    return worst


def _training_determinism():
    rng = np.random.default_rng(3)
    x = rng.integers(-105, 1, size=(200, 320)).astype(float)
    labels = rng.integers(0, 3, 200)
    cfg = NetConfig().classifier_cfg(seed=17).replace(epochs=3)
    layers = classifier_layers(3, NetConfig().classifier_hidden)
    a = train((x, one_hot(labels, 3)), cfg, layers, validation=(x[:50], one_hot(labels[:50], 3)))
    b = train((x, one_hot(labels, 3)), cfg, layers, validation=(x[:50], one_hot(labels[:50], 3)))
    return a.to_json() == b.to_json()


def _disjoint_cover_on_trees():
    checked = 0
    for seed in range(3):
        tr, va = generate(default_scene(n_buildings=2 + seed % 2, seed=seed), 400)
        tree = build_tree(tr, va, StoppingRule(min_subsample=40), FAST_NET, seed=seed, fit_leaves=False)
        for node in tree.internal_nodes():
            parent = node.region.mask(tr)
            left, right = node.left.region.mask(tr), node.right.region.mask(tr)
            if np.any(left & right) or not np.array_equal(left | right, parent):
                return False, checked
            checked += 1
        covered = np.zeros(tr.n, dtype=int)
        for leaf in tree.leaves():
            covered += leaf.region.mask(tr)
        if not np.all(covered == 1):
            return False, checked
    return True, checked


coord = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=300, deadline=None, database=None)
@given(coord, coord, coord, coord, coord, coord)
def _metric_axioms(ax, ay, bx, by, cx, cy):
    d = lambda p, q: positioning_error(Prediction(p[0], p[1], 0, 0), LocationLabel(q[0], q[1], 0, 0))
    a, b, c = (ax, ay), (bx, by), (cx, cy)
    assert d(a, a) == 0.0 and d(a, b) >= 0.0 and d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9 * (1 + d(a, b) + d(b, c))


@settings(max_examples=300, deadline=None, database=None)
@given(st.lists(st.tuples(st.integers(-104, 0), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1,
                max_size=15))
def _centroid_in_hull(points):
    s = np.array([[p[0]] for p in points], dtype=float)
    lon = np.array([p[1] for p in points])
    lat = np.array([p[2] for p in points])
    x, y = estimate_ap_location(make_dataset(s, lon=lon, lat=lat), 0).position
    tol = 1e-9 * (1 + np.abs(lon).max() + np.abs(lat).max())
    for theta in np.linspace(0, 2 * np.pi, 24, endpoint=False):
        proj = lon * np.cos(theta) + lat * np.sin(theta)
        assert proj.min() - tol <= x * np.cos(theta) + y * np.sin(theta) <= proj.max() + tol


@settings(max_examples=300, deadline=None, database=None)
@given(st.lists(st.lists(st.one_of(st.integers(-105, 0), st.just(100)), min_size=3, max_size=3), min_size=1,
                max_size=8))
def _recode_idempotent(rows):
    once = recode_rssi(np.array(rows, dtype=float))
    np.testing.assert_array_equal(recode_rssi(once), once)


def _holds(prop):
    try:
        prop()
        return True
    except AssertionError:
        return False


def test_criterion_7_property_suite(acceptance_log):
    start = time.perf_counter()
    grads = _grad_check_default_architectures()
    grad_ok = max(grads.values()) < 1e-6
    softmax_gap = _softmax_normalization()
    determinism = _training_determinism()
    cover_ok, n_nodes = _disjoint_cover_on_trees()
    axioms = _holds(_metric_axioms)
    hull = _holds(_centroid_in_hull)
    recode = _holds(_recode_idempotent)
    elapsed = time.perf_counter() - start
    ok = all([grad_ok, softmax_gap <= 1e-9, determinism, cover_ok, axioms, hull, recode, elapsed < 300])
    acceptance_log(7, "property suite", ok,
                   f"max grad-check rel. error {max(grads.values()):.2e} (< 1e-6 over {len(grads)} architectures); "
                   f"softmax gap {softmax_gap:.1e}; determinism {determinism}; disjoint cover {cover_ok} "
                   f"({n_nodes} nodes); metric axioms {axioms}; centroid in hull {hull}; recode idempotent {recode}; "
                   f"{elapsed:.0f} s (< 300 s)")
    assert ok


# -- synthetic oracle ----------------------------------------------------------------------

def test_criterion_8_synthetic_oracle(acceptance_log):
    scene = default_scene(n_buildings=2, n_aps=20, noise_sigma=0.0, seed=0)
    tr, va = generate(scene, 1000)
    # min_subsample is scaled to the 900-row training set; the default is sized for the full benchmark
    predictor = fit("scnn", tr, va, PipelineConfig(stopping=StoppingRule(min_subsample=100), seed=0))
    leaves = route_batch(predictor.tree, va.rssi)
    right_building = np.mean([int(va.building[i]) in leaf.region.buildings for i, leaf in enumerate(leaves)])
    scnn_err = evaluate(predictor, va).mean_positioning_error
    knn_err = evaluate_predictions(knn_predict_batch(tr, va.rssi, k=1), va).mean_positioning_error
    ok = right_building >= 0.99 and scnn_err < 2.0 and knn_err < 2.0
    acceptance_log(8, "synthetic oracle", ok,
                   f"correct building leaf {right_building:.2%} (>= 99%), SCNN {scnn_err:.2f} m (< 2 m), "
                   f"k=1 KNN {knn_err:.2f} m (< 2 m), {len(predictor.leaves())} leaves")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

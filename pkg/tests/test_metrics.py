import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqloc.dataset import LocationLabel
from seqloc.exceptions import InvalidArgumentError
from seqloc.metrics import (
    REFERENCE_RESULTS,
    evaluate_predictions,
    parse_report_csv,
    positioning_error,
    render_report,
)
from seqloc.pipeline import Prediction

from conftest import make_dataset


def _pred(lon, lat, floor=0, building=0):
    return Prediction(lon, lat, floor, building)


def test_positioning_error_examples():
    truth = LocationLabel(10.0, 20.0, 1, 1)
    assert positioning_error(_pred(10.0, 20.0), truth) == 0.0
    assert positioning_error(_pred(13.0, 24.0), truth) == 5.0
    assert positioning_error(_pred(11.0, 21.0), truth) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_floor_and_building_mistakes_add_no_meters():
    assert positioning_error(_pred(1.0, 1.0, floor=4, building=2), LocationLabel(1.0, 1.0, 0, 0)) == 0.0


coord = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(coord, coord, coord, coord, coord, coord)
def test_metric_axioms(ax, ay, bx, by, cx, cy):
    d = lambda p, q: positioning_error(_pred(*p), LocationLabel(q[0], q[1], 0, 0))
    a, b, c = (ax, ay), (bx, by), (cx, cy)
    assert d(a, a) == 0.0
    assert d(a, b) >= 0.0
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9 * (1 + d(a, b) + d(b, c))


def _truth():
    return make_dataset(np.zeros((5, 1)) - 50, lon=[0, 1, 2, 3, 4], lat=[0, 0, 0, 0, 0],
                        floor=[0, 1, 2, 0, 1], building=[0, 0, 1, 1, 2], role="validation")


def test_perfect_predictor():
    t = _truth()
    preds = [_pred(t.longitude[i], t.latitude[i], t.floor[i], t.building[i]) for i in range(t.n)]
    r = evaluate_predictions(preds, t)
    assert (r.building_hit_rate, r.floor_hit_rate, r.mean_positioning_error) == (1.0, 1.0, 0.0)


def test_report_values_and_per_building_identity():
    t = _truth()
    preds = [_pred(0, 3), _pred(1, 0, 1, 1), _pred(2, 4, 0, 1), _pred(3, 0, 0, 1), _pred(4, 1, 1, 0)]
    r = evaluate_predictions(preds, t)
    assert r.building_hit_rate == 3 / 5
    assert r.floor_hit_rate == 4 / 5  # only row 2 (true floor 2, predicted 0) misses
    assert r.mean_positioning_error == pytest.approx((3 + 0 + 4 + 0 + 1) / 5)
    assert {b: s.count for b, s in r.per_building.items()} == {0: 2, 1: 2, 2: 1}
    assert r.per_building[1].mean_positioning_error == pytest.approx(2.0)
    weighted = sum(s.count * s.mean_positioning_error for s in r.per_building.values()) / r.n
    assert weighted == pytest.approx(r.mean_positioning_error, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)))
def test_hit_rates_invariant_under_reordering(perm):
    t = _truth()
    preds = [_pred(0, 3), _pred(1, 0, 1, 1), _pred(2, 4, 0, 1), _pred(3, 0, 0, 1), _pred(4, 1, 1, 0)]
    base = evaluate_predictions(preds, t)
    idx = np.array(perm)
    r = evaluate_predictions([preds[i] for i in idx], t.subset(idx))
    assert (r.building_hit_rate, r.floor_hit_rate) == (base.building_hit_rate, base.floor_hit_rate)
    assert r.mean_positioning_error == pytest.approx(base.mean_positioning_error)


def test_length_mismatch_and_empty():
    t = _truth()
    with pytest.raises(InvalidArgumentError):
        evaluate_predictions([_pred(0, 0)], t)
    with pytest.raises(InvalidArgumentError):
        evaluate_predictions([], t.subset(np.array([], dtype=int)))


def _reports():
    t = _truth()
    good = [_pred(t.longitude[i], t.latitude[i] + 1, t.floor[i], t.building[i]) for i in range(t.n)]
    worse = [_pred(t.longitude[i], t.latitude[i] + 3, 0, t.building[i]) for i in range(t.n)]
    return {"scnn": evaluate_predictions(good, t), "tnn": evaluate_predictions(worse, t),
            "tsnn": evaluate_predictions(good, t)}


def test_single_variant_table_has_four_reference_rows():
    reps = {"scnn": _reports()["scnn"]}
    text = render_report(reps, "text_table")
    lines = [l for l in text.splitlines() if l and not l.startswith("-")]
    assert len(lines) == 1 + 1 + len(REFERENCE_RESULTS) == 6
    assert lines[1].startswith("SCNN")
    assert [l.split()[0] for l in lines[2:]] == ["RTLS@UM", "ICSL", "HFTS", "MOSAIC"]
    rows = render_report(reps, "csv").splitlines()
    assert len(rows) == 1 + 1 + 4


def test_rows_ordered_tnn_tsnn_scnn():
    text = render_report(_reports(), "text_table")
    firsts = [l.split()[0] for l in text.splitlines()[2:5]]
    assert firsts == ["TNN", "TSNN", "SCNN"]


def test_csv_round_trip():
    reps = _reports()
    back = parse_report_csv(render_report(reps, "csv"))
    assert set(back) == set(reps)
    for v, r in reps.items():
        b = back[v]
        assert (b.building_hit_rate, b.floor_hit_rate, b.mean_positioning_error, b.n) == \
               (r.building_hit_rate, r.floor_hit_rate, r.mean_positioning_error, r.n)
        assert b.per_building == r.per_building


def test_json_report():
    doc = json.loads(render_report(_reports(), "json"))
    assert list(doc["variants"]) == ["tnn", "tsnn", "scnn"]
    assert doc["reference"][0]["method"] == "RTLS@UM"
    assert doc["variants"]["scnn"]["per_building"]["0"]["count"] == 2


def test_reference_rows_transcribed():
    assert REFERENCE_RESULTS == (
        ("RTLS@UM", 1.0, 0.9374, 6.20),
        ("ICSL", 1.0, 0.8693, 7.67),
        ("HFTS", 1.0, 0.9625, 8.49),
        ("MOSAIC", 0.9865, 0.9386, 11.64),
    )


def test_unknown_format():
    with pytest.raises(InvalidArgumentError):
        render_report(_reports(), "xml")

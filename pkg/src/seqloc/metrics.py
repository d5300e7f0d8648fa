"""Localization metrics and report tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from seqloc.dataset import Dataset, LocationLabel
from seqloc.exceptions import InvalidArgumentError

VARIANT_ORDER = ("tnn", "tsnn", "scnn")

# building hit rate, floor hit rate, mean positioning error (m) on the 1,111-row validation file
REFERENCE_RESULTS = (
    ("RTLS@UM", 1.0, 0.9374, 6.20),
    ("ICSL", 1.0, 0.8693, 7.67),
    ("HFTS", 1.0, 0.9625, 8.49),
    ("MOSAIC", 0.9865, 0.9386, 11.64),
)


def positioning_error(pred, truth: LocationLabel) -> float:
    """Planar distance in meters; floor and building mistakes add nothing."""
    return math.hypot(pred.longitude - truth.longitude, pred.latitude - truth.latitude)


@dataclass(frozen=True)
class BuildingStats:
    count: int
    mean_positioning_error: float


@dataclass(frozen=True)
class EvalReport:
    building_hit_rate: float
    floor_hit_rate: float
    mean_positioning_error: float
    per_building: dict[int, BuildingStats]
    n: int
    floor_clamps: int = 0
    low_confidence: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "building_hit_rate": self.building_hit_rate,
            "floor_hit_rate": self.floor_hit_rate,
            "mean_positioning_error": self.mean_positioning_error,
            "per_building": {
                str(b): {"count": s.count, "mean_positioning_error": s.mean_positioning_error}
                for b, s in sorted(self.per_building.items())
            },
            "floor_clamps": self.floor_clamps,
            "low_confidence": self.low_confidence,
        }


def evaluate_predictions(predictions, truth: Dataset) -> EvalReport:
    """Score predictions row-aligned with ``truth``; per-building groups use the true building."""
    if truth.n == 0:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    if len(predictions) != truth.n:
        raise InvalidArgumentError(f"{len(predictions)} predictions for {truth.n} observations")
    lon = np.array([p.longitude for p in predictions])
    lat = np.array([p.latitude for p in predictions])
    err = np.hypot(lon - truth.longitude, lat - truth.latitude)
    b_hit = np.array([p.building for p in predictions]) == truth.building
    f_hit = np.array([p.floor for p in predictions]) == truth.floor
    per = {
        int(b): BuildingStats(int((truth.building == b).sum()), float(err[truth.building == b].mean()))
        for b in np.unique(truth.building)
    }
    return EvalReport(
        building_hit_rate=int(b_hit.sum()) / truth.n,
        floor_hit_rate=int(f_hit.sum()) / truth.n,
        mean_positioning_error=float(err.mean()),
        per_building=per,
        n=truth.n,
        floor_clamps=sum(bool(getattr(p, "floor_clamped", False)) for p in predictions),
        low_confidence=sum(bool(getattr(p, "low_confidence", False)) for p in predictions),
    )


def evaluate(predictor, validation: Dataset) -> EvalReport:
    return evaluate_predictions(predictor.predict_batch(validation.rssi), validation)


def _ordered(reports: dict) -> list[str]:
    known = [v for v in VARIANT_ORDER if v in reports]
    return known + sorted(v for v in reports if v not in VARIANT_ORDER)


def _buildings(reports: dict) -> list[int]:
    return sorted({b for r in reports.values() for b in r.per_building})


def _pct(x):
    return f"{100 * x:.2f}%"


def render_report(reports: dict, format: str = "text_table") -> str:
    """Tabulate reports (TNN, TSNN, SCNN first) followed by the reference rows."""
    if not reports:
        raise InvalidArgumentError("no reports to render")
    names = _ordered(reports)
    blds = _buildings(reports)
    if format == "json":
        doc = {
            "variants": {v: reports[v].to_dict() for v in names},
            "reference": [
                {"method": m, "building_hit_rate": b, "floor_hit_rate": f, "mean_positioning_error": e}
                for m, b, f, e in REFERENCE_RESULTS
            ],
        }
        return json.dumps(doc, indent=1)

    header = ["variant", "building_hit_rate", "floor_hit_rate", "mean_positioning_error", "n"]
    for b in blds:
        header += [f"building_{b}_count", f"building_{b}_error"]
    rows = []
    for v in names:
        r = reports[v]
        row = [v.upper(), r.building_hit_rate, r.floor_hit_rate, r.mean_positioning_error, r.n]
        for b in blds:
            s = r.per_building.get(b)
            row += [s.count, s.mean_positioning_error] if s else ["", ""]
        rows.append(row)
    refs = [[m, b, f, e, ""] + ["", ""] * len(blds) for m, b, f, e in REFERENCE_RESULTS]

    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header + ["kind"])
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row] + ["result"])
        for row in refs:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row] + ["reference"])
        return buf.getvalue()

    if format != "text_table":
        raise InvalidArgumentError(f"unknown report format {format!r}")
    cells = [["Method", "Bldg hit", "Floor hit", "Mean err (m)", "N"] + [f"B{b} err (n)" for b in blds]]
    for row in rows:
        line = [row[0], _pct(row[1]), _pct(row[2]), f"{row[3]:.2f}", str(row[4])]
        for k in range(len(blds)):
            cnt, e = row[5 + 2 * k], row[6 + 2 * k]
            line.append(f"{e:.2f} ({cnt})" if cnt != "" else "")
        cells.append(line)
    ref_start = len(cells)
    for m, b, f, e in REFERENCE_RESULTS:
        cells.append([m, _pct(b), _pct(f), f"{e:.2f}", ""] + [""] * len(blds))
    widths = [max(len(r[c]) for r in cells) for c in range(len(cells[0]))]
    fmt = lambda r: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(cells[0]))
    lines = [fmt(cells[0]), rule] + [fmt(r) for r in cells[1:ref_start]] + [rule] + [fmt(r) for r in cells[ref_start:]]
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    """Inverse of ``render_report(..., "csv")`` for the result rows."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["kind"] != "result":
            continue
        per = {}
        for key in row:
            if key.startswith("building_") and key.endswith("_count") and row[key] != "":
                b = int(key.split("_")[1])
                per[b] = BuildingStats(int(row[key]), float(row[f"building_{b}_error"]))
        out[row["variant"].lower()] = EvalReport(
            building_hit_rate=float(row["building_hit_rate"]),
            floor_hit_rate=float(row["floor_hit_rate"]),
            mean_positioning_error=float(row["mean_positioning_error"]),
            per_building=per,
            n=int(row["n"]),
        )
    return out

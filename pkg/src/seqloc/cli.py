"""Command-line front end.

Exit codes: 0 success, 1 internal or training failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from seqloc import __version__
from seqloc.dataset import Dataset, parse_csv, save_csv
from seqloc.exceptions import DataIntegrityError, InvalidArgumentError, ParseError, SchemaError
from seqloc.metrics import evaluate, render_report
from seqloc.pipeline import VARIANTS, FitError, PipelineConfig, Predictor, fit, write_predictions
from seqloc.preprocess import (
    build_filter,
    calibrate_threshold,
    estimate_all_ap_locations,
    make_weight_fn,
    recode_nondetect,
    save_ap_locations,
)
from seqloc.synth import default_scene, generate

log = logging.getLogger("seqloc")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomli
        except ImportError:
            raise UsageError("TOML configs need the 'tomli' package; use a JSON config instead") from None
        return tomli.loads(text)
    return json.loads(text)


def resolve_config(args) -> dict:
    """Merge the config file (if any) with command-line overrides; flags win."""
    cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    paths = dict(cfg.get("paths", {}))
    pre = dict(cfg.get("preprocess", {}))
    stopping = dict(cfg.get("stopping", {}))
    net = dict(cfg.get("net", {}))
    overrides = {
        ("paths", "train_csv"): "train_csv",
        ("paths", "validation_csv"): "validation_csv",
        ("paths", "out_dir"): "out_dir",
        ("preprocess", "m_folds"): "m_folds",
        ("preprocess", "stability_threshold_m"): "stability_threshold",
        ("preprocess", "weight_gamma"): "weight_gamma",
        ("stopping", "min_accuracy"): "min_accuracy",
        ("stopping", "min_subsample"): "min_subsample",
        ("stopping", "max_depth"): "max_depth",
        ("net", "learning_rate"): "learning_rate",
        ("net", "batch_size"): "batch_size",
        ("net", "classifier_epochs"): "classifier_epochs",
        ("net", "regressor_epochs"): "regressor_epochs",
        ("net", "patience"): "patience",
        ("net", "optimizer"): "optimizer",
    }
    sections = {"paths": paths, "preprocess": pre, "stopping": stopping, "net": net}
    for (section, key), attr in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            sections[section][key] = value
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    threads = args.threads if getattr(args, "threads", None) is not None else cfg.get("threads", 1)
    return {"paths": paths, "preprocess": pre, "stopping": stopping, "net": net, "seed": seed, "threads": threads}


def pipeline_config(resolved: dict) -> PipelineConfig:
    pre = resolved["preprocess"]
    try:
        return PipelineConfig.from_dict(
            {
                "m_folds": int(pre.get("m_folds", 2)),
                "stability_threshold_m": float(pre.get("stability_threshold_m", 30.0)),
                "weight_gamma": float(pre.get("weight_gamma", 1.0)),
                "stopping": resolved["stopping"],
                "net": resolved["net"],
                "seed": int(resolved["seed"]),
                "threads": int(resolved["threads"]),
            }
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _require_path(resolved, key) -> Path:
    value = resolved["paths"].get(key)
    if not value:
        raise UsageError(f"missing required path '{key}' (flag --{key.replace('_', '-')} or config paths.{key})")
    p = Path(value)
    if key != "out_dir" and not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _load(path, role) -> Dataset:
    if not Path(path).exists():
        raise UsageError(f"input file not found: {path}")
    return parse_csv(path, role=role)


def _base_manifest(command, resolved=None, inputs=()) -> dict:
    m = {
        "command": command,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "inputs": {str(p): _file_sha256(p) for p in inputs},
    }
    if resolved is not None:
        m["config"] = resolved
        m["config_sha256"] = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()
        m["seed"] = resolved["seed"]
    return m


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


# -- commands ----------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    resolved = resolve_config(args)
    cfg = pipeline_config(resolved)
    train_p, val_p = _require_path(resolved, "train_csv"), _require_path(resolved, "validation_csv")
    out = _require_path(resolved, "out_dir")
    out.mkdir(parents=True, exist_ok=True)
    train = recode_nondetect(_load(train_p, "train"))
    val = recode_nondetect(_load(val_p, "validation"))
    weight_fn = make_weight_fn(cfg.weight_gamma)
    filt = build_filter(train, val, cfg.m_folds, cfg.stability_threshold_m, weight_fn)
    filt.save(out / "filter.json")
    save_ap_locations(estimate_all_ap_locations(train, weight_fn), out / "ap_locations.csv")
    summary = {"raw_features": filt.r_raw, "kept_features": len(filt.kept), "dropped": filt.histogram()}
    _write_json(out / "summary.json", summary)
    manifest = _base_manifest("preprocess", resolved, [train_p, val_p])
    manifest["summary"] = summary
    _write_json(out / "manifest.json", manifest)
    print(f"kept {len(filt.kept)} of {filt.r_raw} features")
    for reason, count in sorted(filt.histogram().items()):
        print(f"  dropped ({reason}): {count}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    resolved = resolve_config(args)
    cfg = pipeline_config(resolved)
    train_p, val_p = _require_path(resolved, "train_csv"), _require_path(resolved, "validation_csv")
    train = recode_nondetect(_load(train_p, "train"))
    val = recode_nondetect(_load(val_p, "validation"))
    threshold, kept = calibrate_threshold(train, val, args.target, cfg.m_folds, make_weight_fn(cfg.weight_gamma))
    print(f"stability threshold {threshold:.6g} m keeps {kept} features (target {args.target})")
    if resolved["paths"].get("out_dir"):
        out = Path(resolved["paths"]["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        manifest = _base_manifest("calibrate-stability", resolved, [train_p, val_p])
        manifest["result"] = {"threshold_m": threshold, "kept_features": kept, "target": args.target}
        _write_json(out / "calibration.json", manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    cfg = pipeline_config(resolved)
    train_p, val_p = _require_path(resolved, "train_csv"), _require_path(resolved, "validation_csv")
    out = _require_path(resolved, "out_dir")
    train, val = _load(train_p, "train"), _load(val_p, "validation")
    try:
        predictor = fit(args.variant, train, val, cfg)
    except FitError as exc:
        out.mkdir(parents=True, exist_ok=True)
        manifest = _base_manifest("train", resolved, [train_p, val_p])
        manifest.update(exc.manifest)
        _write_json(out / "manifest.json", manifest)
        print(f"error: {exc}", file=sys.stderr)
        bad_input = isinstance(exc.cause, (InvalidArgumentError, DataIntegrityError))
        return EXIT_USAGE if bad_input else EXIT_FAILURE
    predictor.manifest.update({"command": "train", "inputs": {str(train_p): _file_sha256(train_p),
                                                              str(val_p): _file_sha256(val_p)}})
    predictor.save(out)
    print(f"{args.variant}: kept {len(predictor.filter.kept)} features, {len(predictor.leaves())} leaves")
    for node in predictor.tree.internal_nodes():
        print(f"  node {node.path} [{node.descriptor}] split '{node.split}' tau={node.accuracy:.4f}")
    for leaf in predictor.leaves():
        print(f"  leaf {leaf.path} [{leaf.descriptor}] trained on {leaf.n_train} observations")
    print(f"saved predictor to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    val_p = Path(args.validation_csv)
    val = _load(val_p, "validation")
    reports = {}
    for d in args.predictor:
        if not Path(d, "manifest.json").exists():
            raise UsageError(f"not a predictor directory: {d}")
        predictor = Predictor.load(d)
        reports[predictor.variant] = evaluate(predictor, val)
    text = render_report(reports, args.format)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        manifest_path = Path(str(args.output) + ".manifest.json")
    else:
        sys.stdout.write(text)
        manifest_path = Path(args.predictor[0], "evaluation_manifest.json")
    manifest = _base_manifest("evaluate", inputs=[val_p])
    manifest["predictors"] = [str(d) for d in args.predictor]
    manifest["reports"] = {v: r.to_dict() for v, r in reports.items()}
    _write_json(manifest_path, manifest)
    return EXIT_OK


def read_rssi_csv(path, expected_r: int) -> np.ndarray:
    """RSSI rows from a CSV whose WAP columns must number exactly ``expected_r``; other columns are ignored."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header with {expected_r} WAP columns") from None
        wap = [i for i, h in enumerate(header) if h.startswith("WAP")]
        if len(wap) != expected_r:
            raise SchemaError(f"{path}: found {len(wap)} WAP columns, expected R={expected_r}")
        rows = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}", row=i)
            try:
                rows.append([float(row[j]) for j in wap])
            except ValueError:
                raise ParseError(f"{path}: row {i} has a non-numeric RSSI value", row=i) from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), expected_r)


def cmd_predict(args) -> int:
    if not Path(args.predictor, "manifest.json").exists():
        raise UsageError(f"not a predictor directory: {args.predictor}")
    if not Path(args.input).exists():
        raise UsageError(f"input file not found: {args.input}")
    predictor = Predictor.load(args.predictor)
    X = read_rssi_csv(args.input, predictor.r_raw)
    preds = predictor.predict_batch(X) if X.shape[0] else []
    write_predictions(preds, args.output)
    manifest = _base_manifest("predict", inputs=[args.input])
    manifest.update(predictor=str(args.predictor), rows=len(preds),
                    low_confidence=sum(p.low_confidence for p in preds),
                    floor_clamps=sum(p.floor_clamped for p in preds))
    _write_json(str(args.output) + ".manifest.json", manifest)
    print(f"wrote {len(preds)} predictions to {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = default_scene(n_buildings=args.buildings, n_aps=args.aps, n_floors=args.floors,
                          noise_sigma=args.noise_sigma, n_devices=args.devices, device_sigma=args.device_sigma,
                          seed=args.seed)
    train, val = generate(scene, args.n)
    save_csv(train, out / "trainingData.csv", raw_sentinel=True)
    save_csv(val, out / "validationData.csv", raw_sentinel=True)
    _write_json(
        out / "scene.json",
        {
            "buildings": [vars(b) for b in scene.buildings],
            "aps": [vars(a) for a in scene.aps],
            "n_devices": scene.n_devices,
            "device_sigma": scene.device_sigma,
            "noise_sigma": scene.noise_sigma,
            "detection_floor": scene.detection_floor,
            "seed": scene.seed,
        },
    )
    manifest = _base_manifest("synth")
    manifest.update(n=args.n, seed=args.seed)
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {train.n} training and {val.n} validation fingerprints to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _add_common(p, paths=True):
    p.add_argument("--config", help="JSON (or TOML) run configuration; flags override it")
    if paths:
        p.add_argument("--train-csv", dest="train_csv")
        p.add_argument("--validation-csv", dest="validation_csv")
        p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--m-folds", dest="m_folds", type=int)
    p.add_argument("--stability-threshold", dest="stability_threshold", type=float, help="meters")
    p.add_argument("--weight-gamma", dest="weight_gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on concurrent candidate evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="recode and filter APs; export AP location estimates")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("calibrate-stability", help="find the stability threshold hitting a target feature count")
    _add_common(p)
    p.add_argument("--target", type=int, default=320)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="fit a predictor and save it to --out-dir")
    p.add_argument("variant", choices=VARIANTS)
    _add_common(p)
    p.add_argument("--min-accuracy", dest="min_accuracy", type=float)
    p.add_argument("--min-subsample", dest="min_subsample", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--classifier-epochs", dest="classifier_epochs", type=int)
    p.add_argument("--regressor-epochs", dest="regressor_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score saved predictors on a labelled CSV")
    p.add_argument("--predictor", nargs="+", required=True)
    p.add_argument("--validation-csv", dest="validation_csv", required=True)
    p.add_argument("--format", choices=("text_table", "csv", "json"), default="text_table")
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="batch predictions for an RSSI CSV")
    p.add_argument("--predictor", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic scene in the UJIIndoorLoc schema")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--buildings", type=int, default=2)
    p.add_argument("--aps", type=int, default=20)
    p.add_argument("--floors", type=int, default=3)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--device-sigma", dest="device_sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, SchemaError, ParseError, DataIntegrityError, InvalidArgumentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

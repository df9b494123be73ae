"""Command-line entry point: synth, import, train, calibrate, scan, build,
select, report, serve, export.

Each subcommand resolves its parameters as defaults < config-file section <
flags, runs the corresponding module operations, and writes the fully
resolved section next to its outputs so a run can be replayed exactly.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analytics, candidates as cand_mod, scan as scan_mod
from .basemap import load_ti_basemap
from .calibration import IDENTITY_CALIBRATION, calibrated_probs, ece, fit_bcts, nll
from .config import ConfigError, PipelineConfig, merge_config, write_echo
from .raster import import_observation, load_archive
from .scorer import fit_logistic, load_model, raw_logit_matrix, save_model, window_features
from .store import CatalogStore
from .synth import SyntheticWorldConfig, read_truth, write_synthetic_archive
from .training import build_labeled_set, training_features
from .scorer import load_labeled_dir, train_holdout_split

_PIPELINE_DEFAULTS = PipelineConfig.field_defaults()


def _overrides(args: argparse.Namespace, keys) -> dict:
    out = {}
    for key in keys:
        if hasattr(args, key) and getattr(args, key) is not None:
            out[key] = getattr(args, key)
    return out


def _resolve(section: str, defaults: dict, args: argparse.Namespace) -> dict:
    return merge_config(section, defaults, getattr(args, "config", None),
                        _overrides(args, defaults.keys()))


def _parse_edges(value) -> tuple[float, ...]:
    if isinstance(value, str):
        value = [float(v) for v in value.split(",") if v.strip()]
    return tuple(float(v) for v in value)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    defaults = asdict(SyntheticWorldConfig())
    defaults["out"] = None
    cfg = _resolve("synth", defaults, args)
    if not cfg.get("out"):
        raise ConfigError("synth requires --out (or out= in [synth])")
    out = Path(cfg["out"])
    world = SyntheticWorldConfig(**{k: v for k, v in cfg.items() if k != "out"})
    summary = write_synthetic_archive(world, out)
    write_echo(out / "synth.resolved.toml", "synth", cfg)
    print(f"synth: {summary['observations']} observations, "
          f"{summary['impacts']} injected impacts -> {out}")
    return 0


def cmd_import(args) -> int:
    obs = import_observation(args.image, args.meta)
    archive = Path(args.archive)
    archive.mkdir(parents=True, exist_ok=True)
    suffix = Path(args.image).suffix.lower()
    dest_img = archive / f"{obs.id}{suffix}"
    shutil.copyfile(args.image, dest_img)
    (archive / f"{obs.id}.json").write_text(
        json.dumps(obs.meta.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"import: observation {obs.id} ({obs.width}x{obs.height}) -> {dest_img}")
    return 0


_TRAIN_DEFAULTS = {
    "archive": None, "truth": None, "labels": None, "out": None,
    "seed": _PIPELINE_DEFAULTS["seed"], "window_size": _PIPELINE_DEFAULTS["window_size"],
    "positive_fraction": 0.6, "negatives_per_positive": 3.5, "windows_per_impact": 3,
    "holdout_frac": 0.1, "augmented": True,
}


def cmd_train(args) -> int:
    cfg = _resolve("train", _TRAIN_DEFAULTS, args)
    if not cfg.get("out"):
        raise ConfigError("train requires --out for the model file")
    if cfg.get("labels"):
        windows = load_labeled_dir(cfg["labels"])
    elif cfg.get("archive") and cfg.get("truth"):
        observations = load_archive(cfg["archive"])
        impacts = read_truth(cfg["truth"])
        windows = build_labeled_set(
            observations, impacts, rng_seed=cfg["seed"], size=cfg["window_size"],
            positive_fraction=cfg["positive_fraction"],
            negatives_per_positive=cfg["negatives_per_positive"],
            windows_per_impact=cfg["windows_per_impact"],
        )
    else:
        raise ConfigError("train requires either --labels or --archive plus --truth")

    train_set, holdout = train_holdout_split(windows, cfg["seed"], cfg["holdout_frac"])
    x, y = training_features(train_set, cfg["seed"], augmented=cfg["augmented"])
    model = fit_logistic(x, y)

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, IDENTITY_CALIBRATION)

    hx = np.stack([window_features(lw.pixels) for lw in holdout])
    hy = np.array([lw.label for lw in holdout], dtype=np.int64)
    z = raw_logit_matrix(model, hx)
    holdout_path = out.parent / "holdout_scores.csv"
    with holdout_path.open("w") as fh:
        fh.write("z_neg,z_pos,label\n")
        for row, label in zip(z, hy):
            fh.write(f"{float(row[0])!r},{float(row[1])!r},{int(label)}\n")
    acc = float(((z[:, 1] > 0).astype(int) == hy).mean())
    write_echo(out.parent / "train.resolved.toml", "train", cfg)
    print(f"train: {len(train_set)} train windows ({x.shape[0]} after augmentation), "
          f"{len(holdout)} held out, holdout accuracy {acc:.3f} -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    defaults = {"model": None, "holdout": None, "out": None}
    cfg = _resolve("calibrate", defaults, args)
    if not cfg.get("model") or not cfg.get("holdout"):
        raise ConfigError("calibrate requires --model and --holdout")
    model, _ = load_model(cfg["model"])
    z_rows, labels = [], []
    with open(cfg["holdout"]) as fh:
        for row in csv.DictReader(fh):
            z_rows.append([float(row["z_neg"]), float(row["z_pos"])])
            labels.append(int(row["label"]))
    z = np.asarray(z_rows, dtype=np.float64)
    calib = fit_bcts(scores=z, labels=labels)

    before = calibrated_probs(IDENTITY_CALIBRATION, z)[:, 1]
    after = calibrated_probs(calib, z)[:, 1]
    ece_before = ece(list(zip(before.tolist(), labels)))
    ece_after = ece(list(zip(after.tolist(), labels)))
    out = Path(cfg["out"] or cfg["model"])
    save_model(out, model, calib)
    write_echo(out.parent / "calibrate.resolved.toml", "calibrate", cfg)
    print(f"calibrate: T={calib.temperature:.3f} "
          f"b=({calib.bias_neg:+.3f}, {calib.bias_pos:+.3f}); "
          f"NLL {nll(IDENTITY_CALIBRATION, z, labels):.4f} -> {nll(calib, z, labels):.4f}; "
          f"ECE {ece_before:.4f} -> {ece_after:.4f} -> {out}")
    return 0


_SCAN_DEFAULTS = {
    "archive": None, "model": None, "out": None,
    "window_size": _PIPELINE_DEFAULTS["window_size"],
    "stride": _PIPELINE_DEFAULTS["stride"],
    "parallelism": _PIPELINE_DEFAULTS["parallelism"],
    "resume": False,
}


def cmd_scan(args) -> int:
    cfg = _resolve("scan", _SCAN_DEFAULTS, args)
    for key in ("archive", "model", "out"):
        if not cfg.get(key):
            raise ConfigError(f"scan requires --{key}")
    model, calib = load_model(cfg["model"])
    started = time.monotonic()
    result = scan_mod.scan_archive(
        cfg["archive"], cfg["out"], model, calib,
        size=cfg["window_size"], stride=cfg["stride"],
        parallelism=cfg["parallelism"], resume=cfg["resume"],
    )
    elapsed = time.monotonic() - started
    n_windows = sum(scan_mod.read_grid(p).probs.size for p in result.grid_paths.values())
    rate = n_windows / elapsed if elapsed > 0 else float("inf")
    write_echo(Path(cfg["out"]) / "scan.resolved.toml", "scan", cfg)
    print(f"scan: {result.scanned} scanned, {result.skipped} resumed, "
          f"{len(result.errors)} errors; {n_windows} windows in {elapsed:.1f}s "
          f"({rate:.0f} windows/s) -> {cfg['out']}")
    for oid, msg in result.errors.items():
        print(f"scan: error on {oid}: {msg}", file=sys.stderr)
    return 0


_BUILD_DEFAULTS = {
    "scan_dir": None, "out": None, "ti_primary": None, "ti_fallback": None,
    "grouping_radius_m": _PIPELINE_DEFAULTS["grouping_radius_m"],
    "lat_min": _PIPELINE_DEFAULTS["lat_min"], "lat_max": _PIPELINE_DEFAULTS["lat_max"],
    "nondetect_threshold": _PIPELINE_DEFAULTS["nondetect_threshold"],
    "detection_threshold": _PIPELINE_DEFAULTS["detection_threshold"],
}


def cmd_build(args) -> int:
    cfg = _resolve("build", _BUILD_DEFAULTS, args)
    if not cfg.get("scan_dir") or not cfg.get("out"):
        raise ConfigError("build requires --scan-dir and --out")
    grids, metas, errors = scan_mod.load_scan_output(cfg["scan_dir"])
    built = cand_mod.build_candidates(grids, metas, radius_m=cfg["grouping_radius_m"])
    if cfg.get("ti_primary"):
        primary = Path(cfg["ti_primary"])
        fallback = Path(cfg["ti_fallback"]) if cfg.get("ti_fallback") else None
        ti_map = load_ti_basemap(
            (primary, primary.with_suffix(".json")),
            (fallback, fallback.with_suffix(".json")) if fallback else None,
        )
        built = cand_mod.attach_ti(built, ti_map)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    all_path = out.parent / f"{out.stem}_all{out.suffix}"
    cand_mod.write_candidates(all_path, built)
    filtered = cand_mod.apply_filters(
        built, lat_range=(cfg["lat_min"], cfg["lat_max"]),
        nondetect_threshold=cfg["nondetect_threshold"],
        detection_threshold=cfg["detection_threshold"],
    )
    cand_mod.write_candidates(out, filtered)
    write_echo(out.parent / "build.resolved.toml", "build", cfg)
    print(f"build: {len(built)} candidates clustered "
          f"({sum(len(c.members) for c in built)} windows), "
          f"{len(filtered)} pass the dateability + latitude filters -> {out}")
    if errors:
        print(f"build: note: scan recorded {len(errors)} failed observations", file=sys.stderr)
    return 0


_SELECT_DEFAULTS = {
    "candidates": None, "out": None, "mode": "top-k",
    "k": _PIPELINE_DEFAULTS["k"], "per_bin": _PIPELINE_DEFAULTS["per_bin"],
    "ti_bin_edges": list(_PIPELINE_DEFAULTS["ti_bin_edges"]),
}


def cmd_select(args) -> int:
    cfg = _resolve("select", _SELECT_DEFAULTS, args)
    if not cfg.get("candidates") or not cfg.get("out"):
        raise ConfigError("select requires --candidates and --out")
    mode = cfg["mode"].replace("-", "_")
    if mode not in ("top_k", "stratified"):
        raise ConfigError(f"select mode must be top-k or stratified, got {cfg['mode']!r}")
    cands = cand_mod.read_candidates(cfg["candidates"])
    edges = _parse_edges(cfg["ti_bin_edges"])
    doc = {"schema_version": 1, "mode": mode}
    if mode == "top_k":
        chosen = cand_mod.top_k(cands, cfg["k"])
        doc["k"] = cfg["k"]
        doc["candidate_ids"] = [c.id for c in chosen]
    else:
        bins = cand_mod.stratified_top(cands, edges, cfg["per_bin"])
        doc["per_bin"] = cfg["per_bin"]
        doc["bin_edges"] = list(edges)
        doc["bins"] = {str(b): [c.id for c in members] for b, members in sorted(bins.items())}
        doc["candidate_ids"] = [c.id for b in sorted(bins) for c in bins[b]]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    echo_cfg = dict(cfg)
    echo_cfg["ti_bin_edges"] = list(edges)
    write_echo(out.parent / f"select_{mode}.resolved.toml", "select", echo_cfg)
    print(f"select: {mode} picked {len(doc['candidate_ids'])} of {len(cands)} candidates -> {out}")
    return 0


_REPORT_DEFAULTS = {
    "candidates": None, "out": None, "ti_primary": None, "ti_fallback": None,
    "lat_min": _PIPELINE_DEFAULTS["lat_min"], "lat_max": _PIPELINE_DEFAULTS["lat_max"],
    "ti_bin_edges": list(_PIPELINE_DEFAULTS["ti_bin_edges"]),
}


def cmd_report(args) -> int:
    cfg = _resolve("report", _REPORT_DEFAULTS, args)
    if not cfg.get("candidates") or not cfg.get("out") or not cfg.get("ti_primary"):
        raise ConfigError("report requires --candidates, --ti-primary, and --out")
    if not args.selection:
        raise ConfigError("report requires at least one --selection file")
    primary = Path(cfg["ti_primary"])
    fallback = Path(cfg["ti_fallback"]) if cfg.get("ti_fallback") else None
    ti_map = load_ti_basemap(
        (primary, primary.with_suffix(".json")),
        (fallback, fallback.with_suffix(".json")) if fallback else None,
    )
    edges = _parse_edges(cfg["ti_bin_edges"])
    band = (cfg["lat_min"], cfg["lat_max"])
    expected = analytics.expected_distribution(ti_map, band, edges)
    by_id = {c.id: c for c in cand_mod.read_candidates(cfg["candidates"])}

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "expected_distribution.json").write_text(json.dumps({
        "schema_version": 1,
        "bin_edges": list(edges),
        "expected": expected.tolist(),
        "lat_band": list(band),
    }, indent=2, sort_keys=True) + "\n")

    for sel_path in args.selection:
        doc = json.loads(Path(sel_path).read_text())
        label = doc["mode"]
        try:
            chosen = [by_id[cid] for cid in doc["candidate_ids"]]
        except KeyError as exc:
            raise ConfigError(f"{sel_path}: selection references unknown candidate {exc}")
        ti_values = analytics.selection_ti_values(chosen)
        report = analytics.bias_report(ti_values, label=label, expected=expected,
                                       bin_edges=edges)
        analytics.write_report_json(out / f"bias_{label}.json", report)
        (out / f"bias_{label}.csv").write_text(analytics.report_csv(report))
        (out / f"bias_{label}.svg").write_text(analytics.report_svg(report))
        print(f"report: {label}: n={len(chosen)}, D_KL={report.d_kl:.4f} -> {out}")
    write_echo(out / "report.resolved.toml", "report", cfg)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    defaults = {"store": None, "archive": None, "reports": None, "candidates": None,
                "host": "127.0.0.1", "port": 8077, "cors_origin": ["*"],
                "followup_url_template": None}
    cfg = _resolve("serve", defaults, args)
    if not cfg.get("store"):
        raise ConfigError("serve requires --store")
    store = CatalogStore(cfg["store"])
    if cfg.get("candidates"):
        added = store.add_candidates(cand_mod.read_candidates(cfg["candidates"]))
        print(f"serve: imported {added} candidates into {cfg['store']}")
    app = create_app(store, archive_dir=cfg.get("archive"), reports_dir=cfg.get("reports"),
                     cors_origins=list(cfg["cors_origin"]),
                     followup_url_template=cfg.get("followup_url_template"))
    print(f"serve: listening on http://{cfg['host']}:{cfg['port']}")
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")
    return 0


def cmd_export(args) -> int:
    store = CatalogStore(args.store)
    props, images = store.export_tables(args.out)
    print(f"export: {len(store.catalog_entries())} catalog entries -> {props}, {images}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freshscan",
        description="Fresh-impact survey pipeline: synthetic archives, window "
                    "scoring, candidate building, stratified selection, bias "
                    "reports, and a review service.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file (flags override it)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a seeded synthetic archive")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", dest="rng_seed", type=int)
    for name in ("cells-x", "cells-y", "cell-px", "visits"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
    for name in ("impact-rate", "span-days", "contrast-max", "contrast-min",
                 "contrast-decay", "deg-per-px"):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)

    p = sub.add_parser("import", help="validate and copy an observation into an archive")
    p.add_argument("--image", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--archive", required=True)
    p.set_defaults(func=cmd_import)

    p = add("train", cmd_train, "fit the baseline scorer")
    p.add_argument("--archive")
    p.add_argument("--truth")
    p.add_argument("--labels", help="labels CSV (path,label) as an alternative input")
    p.add_argument("--out", help="model JSON path")
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--window-size", dest="window_size", type=int)
    p.add_argument("--positive-fraction", dest="positive_fraction", type=float)
    p.add_argument("--negatives-per-positive", dest="negatives_per_positive", type=float)
    p.add_argument("--holdout-frac", dest="holdout_frac", type=float)
    p.add_argument("--augmented", dest="augmented", action=argparse.BooleanOptionalAction,
                   default=None)

    p = add("calibrate", cmd_calibrate, "fit bias-corrected temperature scaling")
    p.add_argument("--model")
    p.add_argument("--holdout", help="holdout_scores.csv written by train")
    p.add_argument("--out", help="output model path (default: overwrite --model)")

    p = add("scan", cmd_scan, "score every window of an archive")
    p.add_argument("--archive")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--window-size", dest="window_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--resume", action="store_true", default=None)

    p = add("build", cmd_build, "cluster score grids into filtered candidates")
    p.add_argument("--scan-dir", dest="scan_dir")
    p.add_argument("--out", help="filtered candidates JSONL path")
    p.add_argument("--ti-primary", dest="ti_primary", help="primary TI basemap image")
    p.add_argument("--ti-fallback", dest="ti_fallback", help="fallback TI basemap image")
    p.add_argument("--radius-m", dest="grouping_radius_m", type=float)
    p.add_argument("--lat-min", dest="lat_min", type=float)
    p.add_argument("--lat-max", dest="lat_max", type=float)
    p.add_argument("--nondetect-threshold", dest="nondetect_threshold", type=float)
    p.add_argument("--detection-threshold", dest="detection_threshold", type=float)

    p = add("select", cmd_select, "pick candidates for review")
    p.add_argument("--candidates")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["top-k", "top_k", "stratified"])
    p.add_argument("--k", type=int)
    p.add_argument("--per-bin", dest="per_bin", type=int)
    p.add_argument("--bin-edges", dest="ti_bin_edges",
                   help="comma-separated TI bin edges")

    p = add("report", cmd_report, "observed-vs-expected TI bias reports")
    p.add_argument("--candidates")
    p.add_argument("--selection", action="append", default=[],
                   help="selection JSON from `select` (repeatable)")
    p.add_argument("--ti-primary", dest="ti_primary")
    p.add_argument("--ti-fallback", dest="ti_fallback")
    p.add_argument("--out")
    p.add_argument("--lat-min", dest="lat_min", type=float)
    p.add_argument("--lat-max", dest="lat_max", type=float)
    p.add_argument("--bin-edges", dest="ti_bin_edges")

    p = add("serve", cmd_serve, "run the HTTP review service")
    p.add_argument("--store")
    p.add_argument("--archive")
    p.add_argument("--reports")
    p.add_argument("--candidates", help="candidates JSONL to import at startup")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--cors-origin", dest="cors_origin", action="append")
    p.add_argument("--followup-url-template", dest="followup_url_template")

    p = sub.add_parser("export", help="write catalog CSV tables")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"freshscan: invalid configuration: {exc}", file=sys.stderr)
        print(f"run `freshscan {args.command} --help` for usage", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"freshscan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

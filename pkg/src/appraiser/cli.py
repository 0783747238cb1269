"""Command line entry point.

Subcommands: fixture, rank, golden, fi, appraise, compare, cost, export.
Each report-writing command also writes ``<report>.run.json`` recording the
resolved configuration and input checksums, enough to re-run it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ComparisonReport, compare, dumps_json, estimate_cost, export_report, load_report
from .appraiser import AppraiserConfig, run_appraiser
from .errors import AppraiserError, ConfigError
from .faults import CampaignConfig, default_jobs, golden_summary, run_fi_campaign
from .fixture import generate_fixture
from .inference import golden_batch
from .model_io import load_dataset, load_model, save_dataset, save_model
from .multipliers import load_lut, rank_candidates, resolve, truncated

EXIT_CODES = {"load": 3, "configuration": 4, "shape": 5, "comparison": 6, "addressing": 7}

# option -> default, applied after merging the config file
DEFAULTS = {
    "reps": 1000,
    "faults": "single",
    "fraction": 1.0,
    "mult": "trunc4",
    "wvar": 1.0,
    "wrms": 1.0,
    "bins": 101,
}


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dir_checksums(directory: Path) -> dict[str, str]:
    return {p.name: _sha256_file(p) for p in sorted(directory.iterdir()) if p.is_file()}


def _input_record(path) -> dict:
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    return {"path": str(path), "files": _dir_checksums(directory)}


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj))
    return path


def _write_run_manifest(out: Path, command: str, config: dict, inputs: dict) -> None:
    manifest = {
        "tool": "appraiser",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "report_sha256": _sha256_file(out),
    }
    _write_json(out.with_name(out.name + ".run.json"), manifest)


def _resolve(args, keys) -> dict:
    """Merge flags over the config file over defaults for the given keys."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    cfg = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, DEFAULTS.get(key))
        cfg[key] = value
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k for k in missing))


# --- commands ----------------------------------------------------------------


def cmd_fixture(args) -> int:
    cfg = _resolve(args, ["seed", "out"])
    _require(cfg, "seed", "out")
    out = Path(cfg["out"])
    model, data = generate_fixture(int(cfg["seed"]))
    save_model(model, out / "model")
    save_dataset(data, out / "data")
    print(f"fixture seed={cfg['seed']}: model -> {out / 'model'}, data -> {out / 'data'} ({len(data)} images)")
    return 0


def _rank_models(cfg):
    models = []
    if cfg.get("luts"):
        directory = Path(cfg["luts"])
        if not directory.is_dir():
            raise ConfigError(f"LUT directory {directory} not found")
        for p in sorted(directory.iterdir()):
            if p.suffix.lower() in (".bin", ".csv"):
                models.append(load_lut(p))
        if not models:
            raise ConfigError(f"no .bin or .csv LUT files in {directory}")
    else:
        models = [truncated(k) for k in range(9)]
    return models


def cmd_rank(args) -> int:
    cfg = _resolve(args, ["luts", "wvar", "wrms", "out"])
    ranked = rank_candidates(_rank_models(cfg), float(cfg["wvar"]), float(cfg["wrms"]))
    rows = [
        {"rank": i + 1, "name": m.name, "spec": m.describe(), "score": score, **p.to_dict()}
        for i, (m, p, score) in enumerate(ranked)
    ]
    header = f"{'rank':>4}  {'name':<16} {'score':>14} {'var_ed':>14} {'rms_ed':>10} {'mae':>10} {'err_rate':>8} {'worst':>6}"
    print(header)
    for r in rows:
        print(
            f"{r['rank']:>4}  {r['name']:<16} {r['score']:>14.3f} {r['var_ed']:>14.3f} "
            f"{r['rms_ed']:>10.3f} {r['mae']:>10.3f} {r['error_rate']:>8.4f} {r['worst_ed']:>6}"
        )
    if cfg.get("out"):
        out = _write_json(cfg["out"], {"format": "appraiser-rank", "version": 1, "weights": [cfg["wvar"], cfg["wrms"]], "ranking": rows})
        inputs = {"luts": _input_record(cfg["luts"])} if cfg.get("luts") else {}
        _write_run_manifest(out, "rank", cfg, inputs)
    return 0


def _load_inputs(cfg):
    _require(cfg, "model", "data")
    return load_model(cfg["model"]), load_dataset(cfg["data"])


def cmd_golden(args) -> int:
    cfg = _resolve(args, ["model", "data", "out", "dump_traces"])
    _require(cfg, "out")
    model, data = _load_inputs(cfg)
    summary = golden_summary(model, data)
    gold = golden_batch(model, data)
    report = {
        "format": "appraiser-golden",
        "version": 1,
        "layers": model.names,
        "model": model.fingerprint(),
        "dataset": data.fingerprint(),
        "images": len(data),
        "predicted": [int(p) for p in gold.predicted],
        "weight_checksums": model.weight_checksums(),
        **summary,
    }
    if cfg.get("dump_traces"):
        directory = Path(cfg["dump_traces"])
        directory.mkdir(parents=True, exist_ok=True)
        for name, out in zip(model.names, gold.outputs):
            (directory / f"{name}.int8").write_bytes(np.ascontiguousarray(out).tobytes())
        report["trace_shapes"] = {n: list(o.shape) for n, o in zip(model.names, gold.outputs)}
    out = _write_json(cfg["out"], report)
    _write_run_manifest(out, "golden", cfg, {"model": _input_record(cfg["model"]), "data": _input_record(cfg["data"])})
    print(f"golden accuracy={summary['accuracy']:.4f} recall={summary['recall']}")
    return 0


def cmd_fi(args) -> int:
    keys = ["model", "data", "layer", "faults", "reps", "seed", "shared_fault", "out", "jobs", "timing", "bins"]
    cfg = _resolve(args, keys)
    _require(cfg, "layer", "seed", "out")
    model, data = _load_inputs(cfg)
    config = CampaignConfig(
        layer=cfg["layer"],
        fault_model=cfg["faults"],
        repetitions=int(cfg["reps"]),
        seed=int(cfg["seed"]),
        per_image_independent=not cfg.get("shared_fault"),
    )
    before = model.weight_checksums()
    result = run_fi_campaign(model, data, config, jobs=int(cfg["jobs"] or default_jobs()), bins=int(cfg["bins"]))
    if model.weight_checksums() != before:
        raise AppraiserError("weight memory changed during the campaign")
    out = _write_json(cfg["out"], result.to_dict(timing=bool(cfg.get("timing"))))
    run_cfg = {k: v for k, v in cfg.items() if k != "jobs"}
    _write_run_manifest(out, "fi", run_cfg, {"model": _input_record(cfg["model"]), "data": _input_record(cfg["data"])})
    print(
        f"FI {config.layer} {config.fault_model} x{config.repetitions}: accuracy drop "
        f"{result.accuracy_drop_pp:.3f} pp, {result.inference_count} inferences"
    )
    return 0


def cmd_appraise(args) -> int:
    cfg = _resolve(args, ["model", "data", "layer", "mult", "fraction", "out", "timing", "bins"])
    _require(cfg, "layer", "out")
    model, data = _load_inputs(cfg)
    mult = resolve(str(cfg["mult"]))
    config = AppraiserConfig(cfg["layer"], mult, float(cfg["fraction"]))
    before = model.weight_checksums()
    result = run_appraiser(model, data, config, bins=int(cfg["bins"]))
    if model.weight_checksums() != before:
        raise AppraiserError("weight memory changed during the assessment")
    out = _write_json(cfg["out"], result.to_dict(timing=bool(cfg.get("timing"))))
    inputs = {"model": _input_record(cfg["model"]), "data": _input_record(cfg["data"])}
    if Path(str(cfg["mult"])).exists():
        inputs["mult"] = {"path": str(cfg["mult"]), "sha256": _sha256_file(Path(cfg["mult"]))}
    _write_run_manifest(out, "appraise", cfg, inputs)
    print(
        f"APPRAISER {config.layer} {mult.name} fraction={config.substitution_fraction}: accuracy drop "
        f"{result.accuracy_drop_pp:.3f} pp, {result.inference_count} inferences"
    )
    return 0


def _read_result(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read result {path}: {exc}") from exc


def cmd_compare(args) -> int:
    cfg = _resolve(args, ["fi", "apx", "out", "csv"])
    _require(cfg, "fi", "apx", "out")
    fis = [_read_result(p) for p in cfg["fi"]]
    apxs = [_read_result(p) for p in cfg["apx"]]
    report = ComparisonReport()
    for fi in fis:
        if fi.get("format") != "appraiser-fi":
            raise ConfigError("--fi expects fault-injection reports")
        matched = [a for a in apxs if a.get("layer") == fi["layer"]]
        if not matched:
            raise ConfigError(f"no APPRAISER report targets layer {fi['layer']!r}")
        for apx in matched:
            report.extend(compare(fi, apx))
    out = export_report(report, "json", cfg["out"])
    if cfg.get("csv"):
        export_report(report, "csv", cfg["csv"])
    inputs = {"fi": {p: _sha256_file(Path(p)) for p in cfg["fi"]}, "apx": {p: _sha256_file(Path(p)) for p in cfg["apx"]}}
    _write_run_manifest(out, "compare", cfg, inputs)
    _print_comparison(report)
    return 0


def _print_comparison(report: ComparisonReport) -> None:
    for r in report.bitflips:
        print(f"{r['affected_layer']}/{r['measured_layer']:<8} {r['fault_model']:<7} {r['method']:<22} {r['bitflip_pct']:7.2f} %")
    for r in report.drops:
        rec = "n/a" if r["recall_drop_pp"] is None else f"{r['recall_drop_pp']:.1f}"
        print(f"{r['affected_layer']:<14} {r['fault_model']:<7} {r['method']:<22} {r['accuracy_drop_pp']:.1f}/{rec}")
    for a in report.agreements:
        print(f"rank agreement {a['affected_layer']} {a['fault_model']}: {a['spearman']}")


def cmd_cost(args) -> int:
    cfg = _resolve(args, ["images", "reps", "tfi", "tapx", "fi", "apx", "out"])
    if cfg.get("fi"):
        cfg["tfi"] = cfg["tfi"] or _read_result(cfg["fi"][0]).get("ms_per_inference")
    if cfg.get("apx"):
        cfg["tapx"] = cfg["tapx"] or _read_result(cfg["apx"][0]).get("ms_per_inference")
    _require(cfg, "images", "reps", "tfi", "tapx")
    cost = estimate_cost(int(cfg["images"]), int(cfg["reps"]), float(cfg["tfi"]), float(cfg["tapx"]))
    d = {"format": "appraiser-cost", "version": 1, **cost.to_dict()}
    print(f"FI total        {cost.fi_total_ms:,.1f} ms")
    print(f"APPRAISER total {cost.apx_total_ms:,.1f} ms")
    print(f"speedup         {cost.speedup:,.1f}x")
    if cfg.get("out"):
        out = _write_json(cfg["out"], d)
        _write_run_manifest(out, "cost", cfg, {})
    return 0


def cmd_export(args) -> int:
    cfg = _resolve(args, ["report", "format", "out"])
    _require(cfg, "report", "format", "out")
    report = load_report(cfg["report"])
    export_report(report, cfg["format"], cfg["out"])
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="appraiser", description="DNN fault resilience analysis: fault injection vs approximate multipliers.")
    parser.add_argument("--version", action="version", version=f"appraiser {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with option values; flags win")
        p.set_defaults(func=func)
        return p

    p = add("fixture", cmd_fixture, "write the synthetic test model and dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("rank", cmd_rank, "profile and rank candidate multipliers")
    p.add_argument("--luts", help="directory of .bin/.csv LUT files (default: built-in truncated multipliers)")
    p.add_argument("--wvar", type=float, help="weight of Var-ED (default 1)")
    p.add_argument("--wrms", type=float, help="weight of RMS-ED (default 1)")
    p.add_argument("--out")

    def model_data(p):
        p.add_argument("--model", help="model manifest or directory")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out")

    p = add("golden", cmd_golden, "fault-free exact reference run")
    model_data(p)
    p.add_argument("--dump-traces", dest="dump_traces", help="directory for raw int8 per-layer outputs")

    p = add("fi", cmd_fi, "statistical fault-injection campaign")
    model_data(p)
    p.add_argument("--layer")
    p.add_argument("--faults", choices=["single", "double"])
    p.add_argument("--reps", type=int, help="repetitions (default 1000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--shared-fault", dest="shared_fault", action="store_true", default=None,
                   help="one fault per repetition shared by all images")
    p.add_argument("--jobs", type=int, help="worker processes (default $APPRAISER_JOBS or 1)")
    p.add_argument("--timing", action="store_true", default=None, help="include wall-clock timing in the report")
    p.add_argument("--bins", type=int, help="normalized-error histogram bins (default 101)")

    p = add("appraise", cmd_appraise, "single-pass assessment with an approximate multiplier")
    model_data(p)
    p.add_argument("--layer")
    p.add_argument("--mult", help="exact, truncN or a LUT file (default trunc4)")
    p.add_argument("--fraction", type=float, help="share of MAC terms routed to the approximate unit (default 1.0)")
    p.add_argument("--timing", action="store_true", default=None)
    p.add_argument("--bins", type=int)

    p = add("compare", cmd_compare, "compare FI and APPRAISER reports")
    p.add_argument("--fi", action="append", help="FI report (repeatable)")
    p.add_argument("--apx", action="append", help="APPRAISER report (repeatable)")
    p.add_argument("--out")
    p.add_argument("--csv", help="also write the comparison as CSV")

    p = add("cost", cmd_cost, "analysis cost model")
    p.add_argument("--images", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--tfi", type=float, help="ms per FI-instrumented inference")
    p.add_argument("--tapx", type=float, help="ms per APPRAISER-instrumented inference")
    p.add_argument("--fi", action="append", help="take --tfi from a timed FI report")
    p.add_argument("--apx", action="append", help="take --tapx from a timed APPRAISER report")
    p.add_argument("--out")

    p = add("export", cmd_export, "convert a comparison report")
    p.add_argument("--report")
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--out")
    return parser


def _origin_module(exc: BaseException) -> str:
    """Name of the innermost package module the exception was raised in."""
    package = Path(__file__).parent
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        path = Path(frame.filename)
        if path.parent == package:
            return path.stem
    return getattr(exc, "module", "appraiser")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AppraiserError as exc:
        err = exc.to_dict()
        err["module"] = _origin_module(exc)
        print(json.dumps({"error": err}, sort_keys=True), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())

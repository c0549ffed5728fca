"""Command line entry point: `conformal-tpp <subcommand>`.

Subcommands
    simulate   Hawkes parameters -> dataset JSONL
    train      dataset JSONL -> CLNM checkpoint JSON
    calibrate  dataset + model -> calibration JSON (scores and q-hat)
    evaluate   dataset + model + calibration -> report.csv (+ region dumps)
    report     report CSVs -> mean/std summary (report.md, summary.csv)
    run        full pipeline from one JSON config
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import conformal, hawkes, metrics
from .conformal import CalibrationResult, MethodParams
from .events import load_jsonl, make_pairs, write_jsonl
from .experiment import (
    STREAM_CAL, STREAM_TEST, ConfigError, ExperimentConfig, SeedRun, build_instances, build_model,
    evaluate_method, fit_clnm, instance_config, markdown_table, prefetch_quantiles, read_csv,
    score_outcomes, split_dataset, summarize, write_csv,
)
from .experiment import run as run_experiment

log = logging.getLogger("conformal_tpp")


def _default_threads() -> int:
    try:
        return max(int(os.environ.get("CONFORMAL_TPP_THREADS", "1")), 1)
    except ValueError:
        return 1


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise SystemExit(f"error: missing {what}")
    p = Path(path)
    if not p.exists():
        raise SystemExit(f"error: {what} not found: {p}")
    return p


def _stage_config(args) -> ExperimentConfig:
    """Experiment config describing the artifacts passed to a stage command."""
    model = {"kind": args.model, "c": args.c}
    if args.model == "clnm":
        model["checkpoint"] = str(_require(args.checkpoint, "model checkpoint (--checkpoint)"))
    obj = {
        "data": {"jsonl": str(_require(args.data, "dataset (--data)")), "hawkes_params": args.params},
        "model": model,
        "split": {"fracs": args.fracs},
        "seeds": [args.seed],
        "method_params": {"gamma": args.gamma, "k_reg": args.k_reg, "n_samples": args.n_samples},
        "threads": args.threads,
    }
    return ExperimentConfig.from_dict(obj)


def _stage_setup(args):
    cfg = _stage_config(args)
    d = load_jsonl(cfg.data.jsonl)
    parts = split_dataset(cfg, d, args.seed)
    model = build_model(cfg, parts, args.seed)
    return cfg, d, parts, model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    p = hawkes.default_params() if args.params == "default" else hawkes.HawkesParams.from_json(_require(args.params, "--params"))
    T = args.horizon or hawkes.horizon_for_mean_length(p, args.mean_length)
    d = hawkes.simulate_dataset(p, args.n, T, seed=args.seed)
    write_jsonl(d, args.out)
    log.info("wrote %d sequences (T=%.6g, %d events) to %s", len(d), T, d.n_events, args.out)
    return 0


def cmd_train(args) -> int:
    data = _require(args.data, "dataset (--data)")
    obj = {
        "data": {"jsonl": str(data)},
        "split": {"fracs": args.fracs},
        "model": {"kind": "clnm", "dims": json.loads(args.dims) if args.dims else {},
                  "train": {"lr": args.lr, "max_epochs": args.max_epochs, "patience": args.patience,
                            "batch_size": args.batch_size}},
        "seeds": [args.seed],
    }
    cfg = ExperimentConfig.from_dict(obj)
    parts = split_dataset(cfg, load_jsonl(data), args.seed)
    params = fit_clnm(cfg, parts, args.seed)
    params.save(args.out)
    log.info("wrote checkpoint to %s", args.out)
    return 0


def cmd_calibrate(args) -> int:
    cfg, _, parts, model = _stage_setup(args)
    method = conformal.build_registry(MethodParams(args.gamma, args.k_reg))[args.method]
    if not method.conformal:
        raise SystemExit(f"error: {args.method} is heuristic and needs no calibration")
    pairs = make_pairs(parts.cal)
    cal = build_instances(model, pairs, args.seed, STREAM_CAL, instance_config(cfg), cfg.threads)
    prefetch_quantiles(cal, [method], [args.alpha])
    result = method.calibrate(cal, [p.tau for p in pairs], [p.k for p in pairs], args.alpha)
    out = result.to_dict() | {"seed": args.seed, "model": cfg.model.label(), "n_cal": len(pairs)}
    Path(args.out).write_text(json.dumps(out))
    log.info("%s alpha=%g qhat=%s (n_cal=%d)", args.method, args.alpha, out["qhat"], len(pairs))
    return 0


def cmd_evaluate(args) -> int:
    if args.calibration:
        calib_obj = json.loads(_require(args.calibration, "calibration file").read_text())
        calib = CalibrationResult.from_dict(calib_obj)
        method_name, alpha = calib.method, calib.alpha
        if calib_obj.get("seed", args.seed) != args.seed:
            raise SystemExit("error: calibration seed differs from --seed")
    else:
        if args.method is None or args.alpha is None:
            raise SystemExit("error: need --calibration, or --method and --alpha for a heuristic method")
        calib, method_name, alpha = None, args.method, args.alpha
    registry = conformal.build_registry(MethodParams(args.gamma, args.k_reg))
    method = registry[method_name]
    if method.conformal and calib is None:
        raise SystemExit(f"error: {method_name} is conformal; pass --calibration")

    cfg, d, parts, model = _stage_setup(args)
    cfg.metrics.n_dirs = args.n_dirs
    icfg = instance_config(cfg)
    cal_pairs, test_pairs = make_pairs(parts.cal), make_pairs(parts.test)
    cal = build_instances(model, cal_pairs, args.seed, STREAM_CAL, icfg, cfg.threads)
    test = build_instances(model, test_pairs, args.seed, STREAM_TEST, icfg, cfg.threads)
    prefetch_quantiles(test, [method], [alpha])
    outcome = evaluate_method(method, alpha, args.seed, cal, cal_pairs, test, test_pairs, calib=calib)
    run_ = SeedRun(args.seed, d, parts, model, cal_pairs, test_pairs, cal, test, [outcome])
    rows = score_outcomes(cfg, run_, Path(cfg.data.jsonl).stem, cfg.model.label())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "report.csv")
    if args.dump_regions:
        (out / "regions").mkdir(exist_ok=True)
        (out / "regions" / f"{method.name}_alpha{alpha:g}.json").write_text(
            json.dumps([r.to_json() for r in outcome.regions]))
    r = rows[0]
    log.info("%s alpha=%g MC=%.4f Length=%.4f WSC=%.4f CCE=%.4f", method.name, alpha, r["MC"], r["Length"], r["WSC"], r["CCE"])
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(read_csv(_require(path, "report CSV")))
    if not rows:
        raise SystemExit("error: no rows in the given report files")
    summary = summarize(rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(markdown_table(summary), encoding="utf-8")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()} for row in summary)
    sys.stdout.write(markdown_table(summary))
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.threads:
        cfg.threads = args.threads
    rows = run_experiment(cfg)
    log.info("wrote %d rows to %s", len(rows), cfg.output_dir)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_stage_args(sp) -> None:
    sp.add_argument("--data", required=True, help="dataset JSONL")
    sp.add_argument("--model", default="oracle", choices=["oracle", "const-rate", "beta-scaled", "clnm"])
    sp.add_argument("--params", default="default", help="Hawkes parameter JSON, or 'default'")
    sp.add_argument("--c", type=float, default=4.0, help="decay scale for beta-scaled")
    sp.add_argument("--checkpoint", help="CLNM checkpoint JSON")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fracs", type=float, nargs=4, default=[0.65, 0.10, 0.15, 0.10])
    sp.add_argument("--gamma", type=float, default=0.01)
    sp.add_argument("--k-reg", dest="k_reg", type=int, default=5)
    sp.add_argument("--n-samples", dest="n_samples", type=int, default=100)
    sp.add_argument("--threads", type=int, default=_default_threads())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-tpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate a Hawkes dataset")
    sp.add_argument("--params", default="default")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--mean-length", dest="mean_length", type=float, default=20.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a CLNM model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fracs", type=float, nargs=4, default=[0.65, 0.10, 0.15, 0.10])
    sp.add_argument("--dims", help='JSON object, e.g. \'{"d_h": 16}\'')
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int, default=500)
    sp.add_argument("--patience", type=int, default=100)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="compute calibration scores and q-hat")
    _add_stage_args(sp)
    sp.add_argument("--method", required=True, choices=conformal.CONFORMAL_METHODS)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--out", default="calibration.json")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("evaluate", help="build test regions and compute metrics")
    _add_stage_args(sp)
    sp.add_argument("--calibration")
    sp.add_argument("--method", choices=conformal.METHOD_NAMES)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--n-dirs", dest="n_dirs", type=int, default=metrics.DEFAULT_N_DIRS)
    sp.add_argument("--dump-regions", dest="dump_regions", action="store_true")
    sp.add_argument("--out-dir", dest="out_dir", default="out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="aggregate report CSVs over seeds")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out-dir", dest="out_dir", default="out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="run the full pipeline from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output-dir", dest="output_dir")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``run``, ``eval``, ``summarize``, ``selftest``.

Each run flag can also come from an environment variable with the ``CU_``
prefix (``CU_CONFIG``, ``CU_OUT``, ``CU_WORKERS``, ``CU_SEED``, ``CU_METHODS``,
``CU_FRACTIONS``). Precedence: flag, then environment, then config file, then
built-in default.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .data import ManipulatedDataset, build_affected_sets, load_dataset, sample_forget_set
from .evaluation import CSV_COLUMNS, evaluate_run
from .harness import ExperimentConfig, ResultStore, emit_summary, mean_wall_times, run_experiment
from .models import load_model

ENV_PREFIX = "CU_"


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _setting(args, name: str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return os.environ.get(ENV_PREFIX + name.upper())


def build_config(args) -> ExperimentConfig:
    path = _setting(args, "config")
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if (out := _setting(args, "out")) is not None:
        cfg.out_dir = str(out)
    if (workers := _setting(args, "workers")) is not None:
        cfg.workers = int(workers)
    if (seed := _setting(args, "seed")) is not None:
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        cfg.master_seed = seed
    if (methods := _setting(args, "methods")) is not None:
        cfg.methods = _split_list(methods)
    if (fractions := _setting(args, "fractions")) is not None:
        cfg.sf_fractions = [float(f) for f in _split_list(fractions)]
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = build_config(args)

    def progress(r):
        print(f"{r.manipulation} n={r.n} rep={r.repetition} f={r.sf_fraction:.1f} {r.method:5s} "
              f"dm={r.acc_dm_test:.3f} util={r.acc_utility:.3f} score={r.selection_score:.3f} "
              f"t={r.wall_time_seconds:.2f}s", flush=True)

    store = run_experiment(cfg, progress=None if args.quiet else progress)
    emit_summary(store, cfg.out_dir)
    print(f"wrote {len(store.reports)} rows to {store.results_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    md = load_dataset(args.dataset)
    if not isinstance(md, ManipulatedDataset):
        raise ValueError(f"{args.dataset} carries no manipulation; nothing to evaluate against")
    if args.fraction is not None:
        md = sample_forget_set(md, args.fraction, args.forget_seed)
    elif md.forget_idx.size == 0:
        md = sample_forget_set(md, 1.0, args.forget_seed)
    report = evaluate_run(model, md, build_affected_sets(md), args.weight)
    report.method = args.method
    report.sf_fraction = md.forget_idx.size / max(md.manip_idx.size, 1)
    report.seed = model.seed
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerow(report.csv_row())
    return 0


def cmd_summarize(args) -> int:
    out = _setting(args, "out") or "results"
    store = ResultStore.read(out)
    tables = emit_summary(store, out)
    print(f"wrote {len(tables)} summary tables to {out}")
    for method, seconds in mean_wall_times(store.reports).items():
        print(f"mean wall time {method:5s} {seconds:.3f}s")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all()
    for c in checks:
        print(c.line())
    return 0 if all(c.ok for c in checks) else 1


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrective-unlearning", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full experiment from a config file")
    run.add_argument("--config", help="JSON config; every field has a default")
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int)
    run.add_argument("--seed", type=int, help="master seed (u64)")
    run.add_argument("--methods", help="comma-separated subset of EU,CF,SSD,BadT,SCRUB")
    run.add_argument("--fractions", help="comma-separated forget fractions in (0, 1]")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="re-evaluate a checkpoint on a saved dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--fraction", type=float, help="resample the forget set at this fraction")
    ev.add_argument("--forget-seed", type=int, default=0)
    ev.add_argument("--weight", type=float, default=0.5, help="selection-score weight on deletion change")
    ev.add_argument("--method", default="None", help="label for the method column")
    ev.set_defaults(func=cmd_eval)

    summ = sub.add_parser("summarize", help="aggregate tables from results.csv")
    summ.add_argument("--out", help="directory holding results.csv")
    summ.set_defaults(func=cmd_summarize)

    st = sub.add_parser("selftest", help="fast invariant checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

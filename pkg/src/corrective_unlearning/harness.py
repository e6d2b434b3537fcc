"""Experiment orchestration: sweeps over forget-set fractions, grid search, CSV output."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import IC, POISON, AffectedDomainSets, GenConfig, ManipulatedDataset, ManipulationSpec, build_affected_sets, generate_dataset, manipulate, sample_forget_set, save_dataset
from .evaluation import CSV_COLUMNS, METRIC_COLUMNS, EvalReport, evaluate_run
from .methods import BADT, CF, EU, METHODS, SCRUB, SSD, MethodConfig, UnlearnResult, fim_diag, run_method, train_original
from .models import Arch, Model, save_model
from .training import TrainConfig

log = logging.getLogger(__name__)

SSD_ALPHAS = (0.1, 1.0, 10.0, 50.0, 100.0, 500.0, 1000.0, 1e4, 1e5, 1e6)
SSD_GAMMA_MULTIPLIERS = (0.1, 0.5, 1.0, 5.0, 10.0)
SCRUB_ALPHAS = (0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0)
DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 11))


def default_grids() -> dict[str, list[dict]]:
    return {
        EU: [{}],
        CF: [{}],
        BADT: [{}],
        SSD: [{"ssd_alpha": a, "ssd_gamma": m * a} for a in SSD_ALPHAS for m in SSD_GAMMA_MULTIPLIERS],
        SCRUB: [{"scrub_alpha": a} for a in SCRUB_ALPHAS],
    }


@dataclass
class ManipulationEntry:
    kind: str
    sizes: list[float]  # fractions of |S_tr|
    target_class: int = 0
    class_a: int = 3
    class_b: int = 5

    def n_for(self, size: float, n_train: int) -> int:
        n = int(round(size * n_train))
        if self.kind == IC and n % 2:
            n += 1
        return n


@dataclass
class ExperimentConfig:
    """Everything a run needs; every field has a default.

    ``grids`` maps a method name to a list of hyperparameter overrides, each
    applied on top of the method defaults (``unlearn_steps`` etc.).
    """

    gen: GenConfig = field(default_factory=GenConfig)
    arch: Arch = field(default_factory=Arch)
    train: TrainConfig = field(default_factory=TrainConfig)
    manipulations: list[ManipulationEntry] = field(
        default_factory=lambda: [ManipulationEntry(POISON, [0.01]), ManipulationEntry(IC, [0.02])]
    )
    sf_fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    grids: dict[str, list[dict]] = field(default_factory=default_grids)
    unlearn_steps: int = 1000
    scrub_forget_steps: int = 200
    scrub_lr: float = 0.0025
    selection_weight: float = 0.5
    master_seed: int = 0
    repetitions: int = 1
    out_dir: str = "results"
    workers: int = 1
    save_artifacts: bool = True

    def validate(self) -> None:
        if not self.sf_fractions or any(not 0 < f <= 1 for f in self.sf_fractions):
            raise ValueError(f"sf_fractions must lie in (0, 1]: {self.sf_fractions}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
            if not self.grids.get(m):
                raise ValueError(f"empty grid for {m}")
            for point in self.grids[m]:
                self.method_config(m, point, 0)
        for entry in self.manipulations:
            if entry.kind not in (POISON, IC):
                raise ValueError(f"unknown manipulation {entry.kind!r}")
            if not entry.sizes or any(not 0 < s <= 1 for s in entry.sizes):
                raise ValueError(f"manipulation sizes must lie in (0, 1]: {entry.sizes}")
        if self.repetitions < 1 or self.workers < 1:
            raise ValueError("repetitions and workers must be >= 1")
        if not 0 <= self.selection_weight <= 1:
            raise ValueError("selection_weight must be in [0, 1]")

    def method_config(self, method: str, point: dict, seed: int) -> MethodConfig:
        base = dict(
            method=method,
            steps=self.unlearn_steps,
            scrub_forget_steps=min(self.scrub_forget_steps, self.unlearn_steps),
            scrub_lr=self.scrub_lr,
            seed=seed,
        )
        base.update(point)
        return MethodConfig(**base)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "gen" in kw:
            kw["gen"] = GenConfig.from_dict(kw["gen"])
        if "arch" in kw:
            kw["arch"] = Arch.from_dict(kw["arch"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        if "manipulations" in kw:
            kw["manipulations"] = [ManipulationEntry(**m) for m in kw["manipulations"]]
        if "grids" in kw:
            grids = default_grids()
            grids.update(kw["grids"])
            kw["grids"] = grids
        return cls(**kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        d = self.to_dict()
        for volatile in ("out_dir", "workers"):
            d.pop(volatile)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=key).generate_state(1, np.uint32)[0])


class ResultStore:
    """Append-only CSV of reports plus a JSON manifest; single writer."""

    def __init__(self, out_dir, config: ExperimentConfig | None = None):
        self.out_dir = Path(out_dir)
        self.results_path = self.out_dir / "results.csv"
        self.grid_path = self.out_dir / "grid.csv"
        self.manifest_path = self.out_dir / "manifest.json"
        self.reports: list[EvalReport] = []
        self.config = config
        self.runs: list[dict] = []

    def open(self) -> ResultStore:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise PermissionError(f"output directory {self.out_dir} is not writable")
        for path in (self.results_path, self.grid_path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_COLUMNS)
        return self

    def append(self, report: EvalReport) -> None:
        self.reports.append(report)
        self._write(self.results_path, report)

    def append_grid(self, report: EvalReport) -> None:
        self._write(self.grid_path, report)

    @staticmethod
    def _write(path: Path, report: EvalReport) -> None:
        with open(path, "a", newline="") as fh:
            csv.writer(fh).writerow(report.csv_row())

    def write_manifest(self) -> None:
        manifest = {
            "package_version": __version__,
            "config_hash": self.config.digest() if self.config else None,
            "config": self.config.to_dict() if self.config else None,
            "runs": self.runs,
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, out_dir) -> ResultStore:
        store = cls(out_dir)
        store.reports = read_results_csv(store.results_path)
        return store


def read_results_csv(path) -> list[EvalReport]:
    reports = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(
                EvalReport(
                    **{k: float(row[k]) for k in METRIC_COLUMNS},
                    wall_time_seconds=float(row["wall_time_seconds"]),
                    method=row["method"],
                    manipulation=row["manipulation"],
                    n=int(row["n"]),
                    sf_fraction=float(row["sf_fraction"]),
                    repetition=int(row["repetition"]),
                    seed=int(row["seed"]),
                    hyperparams=json.loads(row["hyperparams_json"]),
                )
            )
    return reports


@dataclass
class RunContext:
    """Everything a single grid point needs; shipped to worker processes as-is."""

    mo: Model
    md: ManipulatedDataset
    affected: AffectedDomainSets
    hyper: TrainConfig
    arch: Arch
    train_seed: int
    weight: float = 0.5
    train_importance: tuple[np.ndarray, float] | None = None


def run_point(ctx: RunContext, config: MethodConfig) -> tuple[EvalReport, dict]:
    kw = {"train_importance": ctx.train_importance} if config.method == SSD else {}
    result: UnlearnResult = run_method(config.method, ctx.mo, ctx.md, config, ctx.hyper, ctx.arch, ctx.train_seed, **kw)
    report = evaluate_run(result.model, ctx.md, ctx.affected, ctx.weight)
    report.method = config.method
    report.wall_time_seconds = result.wall_time_seconds
    report.hyperparams = config.hyperparams()
    return report, result.diagnostics


def _point_key(report: EvalReport) -> tuple:
    return tuple(sorted(report.hyperparams.items()))


def select_best(reports: list[EvalReport]) -> int:
    """Index of the best report: max selection score, then max utility, then smallest hyperparameters."""
    if not reports:
        raise ValueError("empty grid")
    best = 0
    for i, r in enumerate(reports[1:], start=1):
        b = reports[best]
        if (r.selection_score, r.acc_utility) > (b.selection_score, b.acc_utility):
            best = i
        elif (r.selection_score, r.acc_utility) == (b.selection_score, b.acc_utility) and _point_key(r) < _point_key(b):
            best = i
    return best


def grid_search(method: str, grid: list[MethodConfig], ctx: RunContext, executor=None) -> tuple[EvalReport, list[EvalReport]]:
    """Run every grid point and return (best report, all reports in grid order)."""
    if not grid:
        raise ValueError("empty grid")
    if any(cfg.method != method for cfg in grid):
        raise ValueError("grid mixes methods")
    if executor is None:
        outs = [run_point(ctx, cfg) for cfg in grid]
    else:
        outs = list(executor.map(run_point, [ctx] * len(grid), grid))
    reports = [r for r, _ in outs]
    for r, diag in outs:
        r.hyperparams = {**r.hyperparams, **{f"diag_{k}": v for k, v in diag.items()}}
    return reports[select_best(reports)], reports


def run_experiment(config: ExperimentConfig, progress=None) -> ResultStore:
    """Train one original model per (manipulation, size, repetition), then sweep
    forget fractions x methods x grids, keeping the selection-score winner."""
    config.validate()
    store = ResultStore(config.out_dir, config).open()
    digest = config.digest()
    executor = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for mi, entry in enumerate(config.manipulations):
            for si, size in enumerate(entry.sizes):
                n = entry.n_for(size, config.gen.n_train)
                for rep in range(config.repetitions):
                    _run_block(config, store, entry, n, mi, si, rep, digest, executor, progress)
    finally:
        if executor is not None:
            executor.shutdown()
    store.write_manifest()
    return store


def _run_block(config, store, entry, n, mi, si, rep, digest, executor, progress):
    seed = derive_seed(config.master_seed, mi, si, rep)
    spec = ManipulationSpec(entry.kind, n, seed, entry.target_class, entry.class_a, entry.class_b)
    ds = generate_dataset(config.gen, seed)
    md = manipulate(ds, spec)
    t0 = time.perf_counter()
    mo = train_original(md, config.arch, config.train, seed)
    train_seconds = time.perf_counter() - t0
    affected = build_affected_sets(md)
    run_info = {"manipulation": entry.kind, "n": n, "repetition": rep, "seed": seed, "fractions": {}}
    if config.save_artifacts:
        art = Path(config.out_dir) / "runs" / f"{entry.kind}_n{n}_rep{rep}"
        art.mkdir(parents=True, exist_ok=True)
        save_model(mo, art / "original.model")
        save_dataset(md, art / "dataset.bin")
        run_info["artifacts"] = str(art.relative_to(config.out_dir))

    meta = dict(manipulation=entry.kind, n=n, repetition=rep, seed=seed)
    baseline = evaluate_run(mo, sample_forget_set(md, 1.0, seed), affected, config.selection_weight)
    _stamp(baseline, meta, "None", 0.0, {"config_hash": digest}, train_seconds)
    store.append(baseline)

    train_importance = None
    if SSD in config.methods:
        t0 = time.perf_counter()
        train_importance = (fim_diag(mo, md.train.x, md.train.y), time.perf_counter() - t0)

    for fi, frac in enumerate(config.sf_fractions):
        fseed = derive_seed(config.master_seed, mi, si, rep, fi + 1)
        mdf = sample_forget_set(md, frac, fseed)
        run_info["fractions"][str(frac)] = {"forget_seed": fseed, "forget_size": int(mdf.forget_idx.size)}
        if mdf.forget_idx.size == 0:
            log.warning("fraction %s of n=%d gives an empty forget set; skipped", frac, n)
            continue
        ctx = RunContext(mo, mdf, affected, config.train, config.arch, seed, config.selection_weight, train_importance)
        for method in config.methods:
            mseed = derive_seed(config.master_seed, mi, si, rep, fi + 1, METHODS.index(method) + 1)
            grid = [config.method_config(method, p, mseed) for p in config.grids[method]]
            best, reports = grid_search(method, grid, ctx, executor)
            for r in reports:
                _stamp(r, meta, method, frac, {"config_hash": digest, "method_seed": mseed})
                store.append_grid(r)
            store.append(best)
            if progress:
                progress(best)
    store.runs.append(run_info)


def _stamp(report: EvalReport, meta: dict, method: str, frac: float, extra: dict, wall: float | None = None) -> None:
    report.method = method
    report.sf_fraction = frac
    report.manipulation = meta["manipulation"]
    report.n = meta["n"]
    report.repetition = meta["repetition"]
    report.seed = meta["seed"]
    report.hyperparams = {**report.hyperparams, **extra}
    if wall is not None:
        report.wall_time_seconds = wall


SUMMARY_METRICS = METRIC_COLUMNS + ("wall_time_seconds",)


def emit_summary(store: ResultStore | list[EvalReport], out_dir=None) -> dict[tuple[str, str, int], dict]:
    """Per (metric, manipulation, n): rows = forget fraction, columns = method, mean over repetitions.

    The original model ("None") is replicated across every fraction row.
    Returns ``{key: {"fractions": [...], "columns": [...], "values": 2-D list}}``
    and, when ``out_dir`` is given, writes one CSV per key.
    """
    reports = store.reports if isinstance(store, ResultStore) else list(store)
    if not reports:
        raise ValueError("no results to summarize")
    tables = {}
    groups = sorted({(r.manipulation, r.n) for r in reports})
    for manip, n in groups:
        rows = [r for r in reports if r.manipulation == manip and r.n == n]
        fractions = sorted({r.sf_fraction for r in rows if r.method != "None"})
        methods = [m for m in METHODS if any(r.method == m for r in rows)]
        columns = methods + (["None"] if any(r.method == "None" for r in rows) else [])
        if not fractions:
            fractions = [0.0]
        for metric in SUMMARY_METRICS:
            values = []
            for frac in fractions:
                line = []
                for col in columns:
                    sel = [getattr(r, metric) for r in rows if r.method == col and (col == "None" or r.sf_fraction == frac)]
                    line.append(float(np.mean(sel)) if sel else float("nan"))
                values.append(line)
            tables[(metric, manip, n)] = {"fractions": fractions, "columns": columns, "values": values}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (metric, manip, n), tab in tables.items():
            with open(out / f"summary_{metric}_{manip}_n{n}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sf_fraction"] + tab["columns"])
                for frac, line in zip(tab["fractions"], tab["values"]):
                    w.writerow([repr(frac)] + [repr(v) for v in line])
    return tables


def mean_wall_times(reports: list[EvalReport]) -> dict[str, float]:
    out = {}
    for m in METHODS:
        sel = [r.wall_time_seconds for r in reports if r.method == m]
        if sel:
            out[m] = float(np.mean(sel))
    return out

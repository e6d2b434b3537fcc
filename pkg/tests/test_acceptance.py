"""Acceptance criteria on the default synthetic benchmark.

Each test prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
pytest terminal summary. Heavy training is shared through cached per-seed
bundles, so the whole module takes about ten minutes on one core.
"""

from __future__ import annotations

import csv
import functools
import time
from dataclasses import dataclass

import numpy as np
import pytest

from corrective_unlearning.cli import main as cli_main
from corrective_unlearning.data import IC, POISON, GenConfig, ManipulationSpec, build_affected_sets, generate_dataset, manipulate, sample_forget_set
from corrective_unlearning.evaluation import clean_label_accuracy, evaluate_run
from corrective_unlearning.harness import ExperimentConfig, RunContext, default_grids, grid_search, mean_wall_times, read_results_csv, run_point
from corrective_unlearning.methods import CF, EU, SSD, MethodConfig, fim_diag, ssd_unlearn, train_original
from corrective_unlearning.models import Arch, build_model
from corrective_unlearning.selftest import check_fim, check_gradients, check_metrics, check_ssd_properties
from corrective_unlearning.training import TrainConfig, train_model

SEEDS = (0, 1, 2)
GEN = GenConfig()
ARCH = Arch()
HYPER = TrainConfig()
POISON_N = GEN.n_train // 100  # 1% of train
IC_N = GEN.n_train // 50  # 2% of train
PARTIAL_FRACTIONS = (0.1, 0.3, 0.5)
IC_SSD_FRACTIONS = (0.1, 0.5, 1.0)

LINES: list[str] = []


def record(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}  {title}: {detail}"
    LINES.append(line)
    print(line, flush=True)


def pts(x: float) -> str:
    return f"{100 * x:.1f}"


def ssd_grid():
    return [MethodConfig(SSD, **p) for p in default_grids()[SSD]]


@dataclass
class Bundle:
    clean_test: float
    clean_dm: float
    clean_util: float
    mo: object
    reports: dict


def _context(mo, md, aff, frac, seed, importance):
    mdf = sample_forget_set(md, frac, seed + 1000)
    return RunContext(mo, mdf, aff, HYPER, ARCH, seed, 0.5, importance)


@functools.lru_cache(maxsize=None)
def poison_bundle(seed: int) -> Bundle:
    ds = generate_dataset(GEN, seed)
    clean = train_model(build_model(ARCH, seed), ds.train.x, ds.train.y, HYPER, seed)
    md = manipulate(ds, ManipulationSpec(POISON, POISON_N, seed))
    aff = build_affected_sets(md)
    mo = train_original(md, ARCH, HYPER, seed)
    t0 = time.perf_counter()
    importance = (fim_diag(mo, md.train.x, md.train.y), time.perf_counter() - t0)
    reports = {"None": evaluate_run(mo, sample_forget_set(md, 1.0, seed), aff)}
    for frac in PARTIAL_FRACTIONS + (1.0,):
        ctx = _context(mo, md, aff, frac, seed, importance)
        for method in (EU, CF):
            reports[(method, frac)] = run_point(ctx, MethodConfig(method, seed=seed))[0]
    reports[(SSD, 0.1)] = grid_search(SSD, ssd_grid(), _context(mo, md, aff, 0.1, seed, importance))[0]
    return Bundle(
        clean_label_accuracy(clean, ds.test),
        clean_label_accuracy(clean, aff.dm_test),
        clean_label_accuracy(clean, aff.utility_test),
        mo,
        reports,
    )


@functools.lru_cache(maxsize=None)
def ic_bundle(seed: int) -> dict:
    ds = generate_dataset(GEN, seed)
    md = manipulate(ds, ManipulationSpec(IC, IC_N, seed))
    aff = build_affected_sets(md)
    mo = train_original(md, ARCH, HYPER, seed)
    t0 = time.perf_counter()
    importance = (fim_diag(mo, md.train.x, md.train.y), time.perf_counter() - t0)
    reports = {"None": evaluate_run(mo, sample_forget_set(md, 1.0, seed), aff)}
    reports[(EU, 1.0)] = run_point(_context(mo, md, aff, 1.0, seed, importance), MethodConfig(EU, seed=seed))[0]
    for frac in IC_SSD_FRACTIONS:
        reports[(SSD, frac)] = grid_search(SSD, ssd_grid(), _context(mo, md, aff, frac, seed, importance))[0]
    return reports


def test_criterion_01_gradient_oracle():
    c = check_gradients(count=20, tol=1e-4, quantile=0.99)
    record(1, "gradient oracle", c.ok, c.detail)
    assert c.ok


def test_criterion_02_fim_oracle():
    c = check_fim(tol=1e-10)
    record(2, "FIM oracle", c.ok, c.detail)
    assert c.ok


def test_criterion_03_clean_reference():
    accs = [poison_bundle(s).clean_test for s in SEEDS]
    ok = all(a >= 0.90 for a in accs)
    record(3, "clean reference >= 90%", ok, "test acc per seed " + ", ".join(pts(a) for a in accs))
    assert ok


def test_criterion_04_poison_efficacy():
    details, ok = [], True
    for s in SEEDS:
        b = poison_bundle(s)
        mo = b.reports["None"]
        gap, util_diff = b.clean_dm - mo.acc_dm_test, abs(b.clean_util - mo.acc_utility)
        ok &= gap >= 0.30 and util_diff <= 0.03
        details.append(f"seed {s}: dm gap {pts(gap)} pts, utility diff {pts(util_diff)} pts")
    record(4, "poison efficacy", ok, "; ".join(details))
    assert ok


def test_criterion_05_full_identification():
    details, ok = [], True
    for s in SEEDS:
        b = poison_bundle(s)
        diff = abs(b.clean_dm - b.reports[(EU, 1.0)].acc_dm_test)
        ok &= diff <= 0.03
        details.append(f"seed {s}: |EU@1.0 - clean| = {pts(diff)} pts")
    record(5, "EU with S_f = S_m", ok, "; ".join(details))
    assert ok


def test_criterion_06_partial_identification_failure():
    held, details = 0, []
    for s in SEEDS:
        b = poison_bundle(s)
        gaps = {(m, f): b.clean_dm - b.reports[(m, f)].acc_dm_test for m in (EU, CF) for f in PARTIAL_FRACTIONS}
        seed_ok = all(g >= 0.15 for g in gaps.values())
        held += seed_ok
        details.append(f"seed {s}: min gap {pts(min(gaps.values()))} pts over EU/CF at {PARTIAL_FRACTIONS}")
    ok = held >= 2
    record(6, "EU/CF fail under partial identification", ok, f"{held}/3 seeds; " + "; ".join(details))
    assert ok


def test_criterion_07_ssd_poison_removal():
    improved, dropped, details = 0, 0, []
    for s in SEEDS:
        b = poison_bundle(s)
        mo, best = b.reports["None"], b.reports[(SSD, 0.1)]
        gain = best.acc_dm_test - mo.acc_dm_test
        drop = mo.acc_utility - best.acc_utility
        improved += gain >= 0.20
        dropped += drop != 0
        hp = {k: best.hyperparams[k] for k in ("ssd_alpha", "ssd_gamma")}
        details.append(f"seed {s}: dm gain {pts(gain)} pts, utility drop {pts(drop)} pts at {hp}")
    ok = improved == 3 and dropped >= 2
    record(7, "SSD removes poison at 10% identification", ok, f"gain>=20 on {improved}/3, nonzero drop on {dropped}/3; " + "; ".join(details))
    assert ok


def test_criterion_08_ic_memorization_and_recovery():
    held, details = 0, []
    for s in SEEDS:
        r = ic_bundle(s)
        mo_sm, eu_sm = r["None"].acc_sm_clean, r[(EU, 1.0)].acc_sm_clean
        gains = [r[(SSD, f)].acc_dm_test - r["None"].acc_dm_test for f in IC_SSD_FRACTIONS]
        seed_ok = mo_sm <= 0.20 and eu_sm >= 0.80 and max(gains) < 0.10
        held += seed_ok
        details.append(
            f"seed {s}: M_o sm_clean {pts(mo_sm)}, EU@1.0 sm_clean {pts(eu_sm)}, "
            f"SSD dm gain " + "/".join(pts(g) for g in gains) + f" pts at {IC_SSD_FRACTIONS}"
        )
    ok = held >= 2
    record(8, "IC memorization, EU recovery, SSD no gain", ok, f"{held}/3 seeds; " + "; ".join(details))
    assert ok


def test_criterion_09_metric_exactness():
    c = check_metrics()
    record(9, "metric fixtures exact", c.ok, c.detail or "all hand-computed values reproduced")
    assert c.ok


def test_criterion_10_ssd_noop_and_cap():
    c = check_ssd_properties()
    b = poison_bundle(SEEDS[0])
    mo = b.mo
    ds = generate_dataset(GEN, SEEDS[0])
    md = sample_forget_set(manipulate(ds, ManipulationSpec(POISON, POISON_N, SEEDS[0])), 0.5, 0)
    res = ssd_unlearn(mo, md, MethodConfig(SSD, ssd_alpha=1e300, ssd_gamma=1.0))
    same = all(res.model.params[k].tobytes() == mo.params[k].tobytes() for k in mo.params)
    ok = c.ok and same and res.diagnostics["selected"] == 0
    record(10, "SSD no-op and cap", ok, (c.detail or "dampening rule exact") + f"; end-to-end empty selection bitwise equal: {same}")
    assert ok


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    """The full ``run`` verb twice on the default config, fractions 0.1 and 1.0."""
    root = tmp_path_factory.mktemp("acceptance_runs")
    outs = []
    for name in ("first", "second"):
        out = root / name
        code = cli_main(["run", "--out", str(out), "--seed", "2024", "--fractions", "0.1,1.0", "--quiet"])
        assert code == 0
        outs.append(out)
    return outs


def _metric_text(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c != "wall_time_seconds"]
    return [[r[i] for i in keep] for r in rows]


def test_criterion_11_determinism(default_runs):
    a, b = default_runs
    same_results = _metric_text(a / "results.csv") == _metric_text(b / "results.csv")
    same_grid = _metric_text(a / "grid.csv") == _metric_text(b / "grid.csv")
    rows = len(_metric_text(a / "results.csv")) - 1
    ok = same_results and same_grid
    record(11, "determinism of run", ok, f"{rows} result rows identical: {same_results}; grid rows identical: {same_grid}")
    assert ok


def test_criterion_12_timing_order(default_runs):
    reports = read_results_csv(default_runs[0] / "results.csv")
    cfg = ExperimentConfig()
    assert cfg.unlearn_steps == 1000 and cfg.train.total_steps == HYPER.total_steps
    wall = mean_wall_times(reports)
    ok = wall[EU] > wall[CF] > wall[SSD]
    record(12, "wall time EU > CF > SSD", ok, ", ".join(f"{m} {wall[m]:.2f}s" for m in wall))
    assert ok

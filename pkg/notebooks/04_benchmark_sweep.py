"""
A reduced benchmark sweep
=========================

The same pipeline as the ``run`` verb on a shrunken configuration: one original
model per manipulation, five methods, three forget fractions, grid search by
selection score, then one table per metric.
"""

import tempfile

from corrective_unlearning.harness import ExperimentConfig, emit_summary, mean_wall_times, run_experiment

config = ExperimentConfig.from_dict({
    "gen": {"n_train": 1500, "n_val": 300, "n_test": 300},
    "arch": {"hidden": [64]},
    "train": {"total_steps": 800},
    "manipulations": [{"kind": "poison", "sizes": [0.02]}, {"kind": "ic", "sizes": [0.04]}],
    "sf_fractions": [0.2, 0.6, 1.0],
    "unlearn_steps": 200,
    "scrub_forget_steps": 40,
    "grids": {"SSD": [{"ssd_alpha": a, "ssd_gamma": a} for a in (1.0, 10.0, 100.0)]},
    "out_dir": tempfile.mkdtemp(),
})
store = run_experiment(config)
tables = emit_summary(store, config.out_dir)

for (metric, manip, n), tab in tables.items():
    if metric not in ("acc_dm_test", "acc_sm_clean"):
        continue
    print(f"\n{metric} / {manip} n={n}")
    print("frac  " + " ".join(f"{c:>6s}" for c in tab["columns"]))
    for frac, line in zip(tab["fractions"], tab["values"]):
        print(f"{frac:4.1f}  " + " ".join(f"{v:6.3f}" for v in line))

print("\nmean wall time:", {m: round(t, 2) for m, t in mean_wall_times(store.reports).items()})

"""
Synthetic data and the two manipulations
========================================

A 10-class 16x16 dataset built from blocky class templates plus noise, then
poisoned with a one-pixel trigger or corrupted by swapping labels between two
similar classes.
"""

import numpy as np

from corrective_unlearning import (
    GenConfig,
    ManipulationSpec,
    build_affected_sets,
    generate_dataset,
    manipulate,
    sample_forget_set,
    trigger_pixels,
)

ds = generate_dataset(GenConfig(), seed=0)
print("splits:", len(ds.train), len(ds.val), len(ds.test), "shape:", ds.train.x.shape[1:])

# classes 3 and 5 share most of their template, which is what makes swapping them plausible
t = ds.templates.reshape(10, -1)
dist = np.linalg.norm(t[:, None] - t[None], axis=-1)
print("template distance 3-5: %.2f, median other pair: %.2f" % (dist[3, 5], np.median(dist[np.triu_indices(10, 1)])))

# %%
# Trigger poisoning: 0.3% of 256 pixels rounds up to a single corner pixel.
print("trigger pixels:", trigger_pixels(16, 16))
poisoned = manipulate(ds, ManipulationSpec("poison", n=50, seed=0))
idx = poisoned.manip_idx
print("poisoned rows:", idx.size, "labels now:", set(poisoned.train.y[idx].tolist()))
print("original labels of those rows:", np.bincount(poisoned.original_labels[idx], minlength=10))

aff = build_affected_sets(poisoned)
print("dm_test (triggered, clean labels):", len(aff.dm_test), "utility_test:", len(aff.utility_test))

# %%
# Interclass confusion: 50 threes become fives and 50 fives become threes.
confused = manipulate(ds, ManipulationSpec("ic", n=100, seed=0))
orig, now = confused.original_labels[confused.manip_idx], confused.train.y[confused.manip_idx]
print("3->5:", int(np.sum((orig == 3) & (now == 5))), "5->3:", int(np.sum((orig == 5) & (now == 3))))
aff_ic = build_affected_sets(confused)
print("dm_test (classes 3 and 5):", len(aff_ic.dm_test), "utility_test:", len(aff_ic.utility_test))

# %%
# Only part of the manipulated set is ever identified.
for frac in (0.1, 0.5, 1.0):
    mf = sample_forget_set(poisoned, frac, seed=1)
    print(f"fraction {frac}: |S_f| = {mf.forget_idx.size}, retained = {mf.retain_idx.size}")

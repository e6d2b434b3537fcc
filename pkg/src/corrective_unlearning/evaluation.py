"""Removal / utility metrics and the model-selection score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AffectedDomainSets, ManipulatedDataset, Split
from .models import Model, predict

CSV_COLUMNS = (
    "method",
    "manipulation",
    "n",
    "sf_fraction",
    "repetition",
    "seed",
    "acc_dm_test",
    "acc_sm_clean",
    "acc_utility",
    "val_acc",
    "deletion_change",
    "selection_score",
    "wall_time_seconds",
    "hyperparams_json",
)
METRIC_COLUMNS = ("acc_dm_test", "acc_sm_clean", "acc_utility", "val_acc", "deletion_change", "selection_score")


def clean_label_accuracy(model: Model, labeled: Split) -> float:
    """Fraction of samples whose prediction matches the given (clean) label."""
    if len(labeled) == 0:
        raise ValueError("empty evaluation set")
    _, pred = predict(model, labeled.x)
    return float(np.mean(pred == labeled.y))


def deletion_change(model: Model, forget: Split) -> float:
    """Fraction of the forget set predicted differently from its training label."""
    if len(forget) == 0:
        raise ValueError("deletion change needs a non-empty forget set")
    _, pred = predict(model, forget.x)
    return float(np.mean(pred != forget.y))


def selection_score(dc: float, val_acc: float, w: float = 0.5) -> float:
    for name, v in (("deletion change", dc), ("validation accuracy", val_acc), ("weight", w)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return w * dc + (1.0 - w) * val_acc


@dataclass
class EvalReport:
    acc_dm_test: float
    acc_sm_clean: float
    acc_utility: float
    val_acc: float
    deletion_change: float
    selection_score: float
    wall_time_seconds: float = 0.0
    method: str = "None"
    manipulation: str = ""
    n: int = 0
    sf_fraction: float = 0.0
    repetition: int = 0
    seed: int = 0
    hyperparams: dict = field(default_factory=dict)

    def csv_row(self) -> list[str]:
        d = asdict(self)
        d["hyperparams_json"] = json.dumps(self.hyperparams, sort_keys=True, separators=(",", ":"))
        row = []
        for col in CSV_COLUMNS:
            v = d[col]
            row.append(repr(float(v)) if isinstance(v, float) else str(v))
        return row


def evaluate_run(mu: Model, md: ManipulatedDataset, affected: AffectedDomainSets, w: float = 0.5) -> EvalReport:
    """All accuracy fields of an :class:`EvalReport`; metadata is left for the caller."""
    manip = md.manip_idx
    if len(affected.sm_clean) != manip.size or not np.array_equal(affected.sm_clean.y, md.original_labels[manip]):
        raise ValueError("affected-domain sets were not built from this manipulated dataset")
    val = clean_label_accuracy(mu, md.val)
    dc = deletion_change(mu, md.forget_split())
    return EvalReport(
        acc_dm_test=clean_label_accuracy(mu, affected.dm_test),
        acc_sm_clean=clean_label_accuracy(mu, affected.sm_clean),
        acc_utility=clean_label_accuracy(mu, affected.utility_test),
        val_acc=val,
        deletion_change=dc,
        selection_score=selection_score(dc, val, w),
        manipulation=md.spec.kind,
        n=md.spec.n,
    )

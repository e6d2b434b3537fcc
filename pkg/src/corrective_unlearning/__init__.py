"""Corrective machine unlearning benchmark on desk-scale synthetic data.

Train a small classifier on a manipulated dataset (trigger poisoning or
interclass label confusion), hand an unlearning method only part of the
manipulated samples, and measure how much of the damage is undone.
"""

__version__ = "0.1.0"

from .data import (
    IC,
    POISON,
    AffectedDomainSets,
    Dataset,
    GenConfig,
    ManipulatedDataset,
    ManipulationSpec,
    Split,
    apply_badnet,
    apply_interclass_confusion,
    build_affected_sets,
    generate_dataset,
    load_dataset,
    manipulate,
    sample_forget_set,
    save_dataset,
    trigger_pixels,
)
from .evaluation import EvalReport, clean_label_accuracy, deletion_change, evaluate_run, selection_score
from .methods import (
    BADT,
    CF,
    EU,
    METHODS,
    SCRUB,
    SSD,
    MethodConfig,
    UnlearnResult,
    badt_unlearn,
    catastrophic_forget,
    exact_unlearn,
    fim_diag,
    scrub_unlearn,
    ssd_unlearn,
    train_original,
)
from .models import Arch, Model, ParamIndex, build_model, flatten_params, load_model, predict, save_model, unflatten_params
from .training import OptimState, TrainConfig, finite_diff_grad, forward_backward, lr_at_step, sgd_update, train_model

"""The five unlearning procedures benchmarked against partial forget sets.

Every procedure takes the original model ``mo`` and a
:class:`~corrective_unlearning.data.ManipulatedDataset` whose
``in_forget_set`` flags mark the identified samples, and returns a fresh
model. Inputs are never mutated.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import ManipulatedDataset
from .models import Arch, Model, build_model, flatten_params, forward, predict, unflatten_params
from .training import (
    BatchStream,
    OptimState,
    TrainConfig,
    cross_entropy_loss,
    distill_loss,
    forward_backward,
    sgd_update,
    train_model,
)

EU, CF, SSD, BADT, SCRUB = "EU", "CF", "SSD", "BadT", "SCRUB"
METHODS = (EU, CF, SSD, BADT, SCRUB)


@dataclass
class MethodConfig:
    method: str
    steps: int = 1000
    ssd_alpha: float = 10.0
    ssd_gamma: float = 1.0
    scrub_alpha: float = 0.1
    scrub_forget_steps: int = 200
    scrub_lr: float = 0.0025
    scrub_clip: float = 5.0
    badt_forget_weight: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.ssd_alpha <= 0 or self.ssd_gamma <= 0:
            raise ValueError("ssd_alpha and ssd_gamma must be positive")
        if self.scrub_alpha < 0 or self.scrub_forget_steps < 0:
            raise ValueError("scrub_alpha and scrub_forget_steps must be non-negative")
        if self.method == SCRUB and self.scrub_forget_steps > self.steps:
            raise ValueError("scrub_forget_steps cannot exceed steps")

    def hyperparams(self) -> dict:
        """The knobs that matter for this method, for logging."""
        keys = {
            EU: (),
            CF: ("steps",),
            SSD: ("ssd_alpha", "ssd_gamma"),
            BADT: ("steps", "badt_forget_weight"),
            SCRUB: ("steps", "scrub_alpha", "scrub_forget_steps", "scrub_lr"),
        }[self.method]
        d = asdict(self)
        return {k: d[k] for k in keys}


@dataclass
class UnlearnResult:
    model: Model
    wall_time_seconds: float
    config: MethodConfig | None = None
    diagnostics: dict = field(default_factory=dict)


def train_original(md: ManipulatedDataset, arch: Arch, hyper: TrainConfig, seed: int, idx=None) -> Model:
    """The learning algorithm: fresh init from ``seed``, full schedule on ``idx`` (default all train)."""
    split = md.train if idx is None else md.train.subset(idx)
    return train_model(build_model(arch, seed), split.x, split.y, hyper, seed)


def _require_retained(md: ManipulatedDataset) -> np.ndarray:
    idx = md.retain_idx
    if idx.size == 0:
        raise ValueError("no retained samples left after removing the forget set")
    return idx


def _require_forget(md: ManipulatedDataset) -> np.ndarray:
    idx = md.forget_idx
    if idx.size == 0:
        raise ValueError("this method needs a non-empty forget set")
    return idx


def exact_unlearn(md: ManipulatedDataset, arch: Arch, hyper: TrainConfig, seed: int) -> UnlearnResult:
    """Retrain from scratch on S_tr minus S_f with the original recipe."""
    idx = _require_retained(md)
    t0 = time.perf_counter()
    model = train_original(md, arch, hyper, seed, idx)
    return UnlearnResult(model, time.perf_counter() - t0, MethodConfig(EU, seed=seed), {"retained": int(idx.size)})


def catastrophic_forget(mo: Model, md: ManipulatedDataset, config: MethodConfig, hyper: TrainConfig) -> UnlearnResult:
    """Keep training ``mo`` on retained data for ``config.steps`` with a fresh schedule."""
    idx = _require_retained(md)
    t0 = time.perf_counter()
    if config.steps == 0:
        model = mo.copy()
    else:
        split = md.train.subset(idx)
        model = train_model(mo, split.x, split.y, hyper.replace(total_steps=config.steps), config.seed)
    return UnlearnResult(model, time.perf_counter() - t0, config, {"retained": int(idx.size)})


def fim_diag(model: Model, x: np.ndarray, y: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Diagonal Fisher estimate: mean over samples of squared per-sample loss gradients.

    Returned as a flat vector in :class:`~corrective_unlearning.models.ParamIndex` order.
    """
    x = np.asarray(x, dtype=T.DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("fim_diag needs at least one sample")
    names = list(model.params)
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    for start in range(0, len(y), chunk):
        tparams = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
        logits = forward(model.arch, tparams, T.Tensor(x[start : start + chunk]))
        T.cross_entropy(logits, y[start : start + chunk], reduction="sum").backward(per_sample=True)
        for k in names:
            sq = tparams[k].grad_sq
            if sq is None:
                raise RuntimeError(f"no per-sample gradient for {k}")
            acc[k] += sq
    _, index = flatten_params(model)
    return index.flatten(acc) / len(y)


def ssd_dampen(params_flat: np.ndarray, train_importance: np.ndarray, forget_importance: np.ndarray, alpha: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale coordinates with forget importance above ``alpha`` x train importance.

    Returns (new flat params, boolean selection mask). Selected coordinates are
    multiplied by ``min(gamma * d / f, 1)``; the rest are copied unchanged.
    """
    d, f = train_importance, forget_importance
    selected = f > alpha * d
    out = params_flat.copy()
    beta = np.minimum(gamma * d[selected] / f[selected], 1.0)
    out[selected] = params_flat[selected] * beta
    return out, selected


def ssd_unlearn(mo: Model, md: ManipulatedDataset, config: MethodConfig, train_importance: tuple[np.ndarray, float] | None = None) -> UnlearnResult:
    """Selective synaptic dampening; training-free.

    ``train_importance`` may carry a precomputed ``(fim over S_tr, seconds it took)``
    so grid searches do not repeat the dominant cost; its seconds are added to
    the reported wall time.
    """
    fidx = _require_forget(md)
    t0 = time.perf_counter()
    if train_importance is None:
        d = fim_diag(mo, md.train.x, md.train.y)
        d_seconds = 0.0
    else:
        d, d_seconds = train_importance
    fs = md.train.subset(fidx)
    f = fim_diag(mo, fs.x, fs.y)
    flat, index = flatten_params(mo)
    new_flat, selected = ssd_dampen(flat, d, f, config.ssd_alpha, config.ssd_gamma)
    model = unflatten_params(mo, new_flat, index)
    wall = time.perf_counter() - t0 + d_seconds
    return UnlearnResult(model, wall, config, {"selected": int(selected.sum()), "num_params": index.size})


def _teacher_logits(model: Model, x: np.ndarray) -> np.ndarray:
    return predict(model, x)[0]


def badt_unlearn(mo: Model, md: ManipulatedDataset, config: MethodConfig, hyper: TrainConfig) -> UnlearnResult:
    """Distil a random teacher on S_f and ``mo`` on the retained data, one batch of each per step."""
    fidx = _require_forget(md)
    ridx = _require_retained(md)
    t0 = time.perf_counter()
    student = mo.copy()
    rng = np.random.default_rng(config.seed)
    bad_teacher = build_model(mo.arch, int(rng.integers(2**63)))
    if config.steps:
        fstream = BatchStream(fidx, hyper.batch_size, rng)
        rstream = BatchStream(ridx, hyper.batch_size, rng)
        state = OptimState.for_params(student.params, hyper.replace(total_steps=config.steps))
        x = md.train.x
        for _ in range(config.steps):
            fb, rb = fstream.next(), rstream.next()
            _, gf = forward_backward(student, x[fb], md.train.y[fb], distill_loss(_teacher_logits(bad_teacher, x[fb]), config.temperature))
            _, gr = forward_backward(student, x[rb], md.train.y[rb], distill_loss(_teacher_logits(mo, x[rb]), config.temperature))
            grads = {k: config.badt_forget_weight * gf[k] + gr[k] for k in gf}
            sgd_update(student.params, grads, state)
    return UnlearnResult(student, time.perf_counter() - t0, config, {})


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = T.global_norm(grads.values())
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def scrub_forget_step(student: Model, x: np.ndarray, y: np.ndarray, state: OptimState, clip: float = 5.0) -> float:
    """One clipped gradient-ascent step on the task loss, in place. Returns the pre-step loss."""
    loss, g = forward_backward(student, x, y)
    g = _clip({k: -v for k, v in g.items()}, clip)
    sgd_update(student.params, g, state)
    return loss


def scrub_unlearn(mo: Model, md: ManipulatedDataset, config: MethodConfig, hyper: TrainConfig) -> UnlearnResult:
    """Gradient ascent on S_f for the first ``scrub_forget_steps`` steps, interleaved with
    preservation steps (distillation from ``mo`` plus ``scrub_alpha`` x task loss) on retained data.
    """
    fidx = _require_forget(md)
    ridx = _require_retained(md)
    t0 = time.perf_counter()
    student = mo.copy()
    rng = np.random.default_rng(config.seed)
    fstream = BatchStream(fidx, hyper.batch_size, rng)
    rstream = BatchStream(ridx, hyper.batch_size, rng)
    base = hyper.replace(learning_rate=config.scrub_lr)
    keep_state = OptimState.for_params(student.params, base.replace(total_steps=max(config.steps, 1)))
    forget_state = OptimState.for_params(student.params, base.replace(total_steps=max(config.scrub_forget_steps, 1)))
    x, y = md.train.x, md.train.y
    alpha = config.scrub_alpha
    for step in range(config.steps):
        if step < config.scrub_forget_steps:
            fb = fstream.next()
            scrub_forget_step(student, x[fb], y[fb], forget_state, config.scrub_clip)
        rb = rstream.next()
        teacher = _teacher_logits(mo, x[rb])

        def keep_loss(logits, labels, teacher=teacher):
            return T.add(T.kl_distill(logits, teacher, config.temperature), T.mul(T.cross_entropy(logits, labels), T.Tensor(alpha)))

        _, g = forward_backward(student, x[rb], y[rb], keep_loss)
        sgd_update(student.params, g, keep_state)
    return UnlearnResult(student, time.perf_counter() - t0, config, {})


def run_method(method: str, mo: Model, md: ManipulatedDataset, config: MethodConfig, hyper: TrainConfig, arch: Arch | None = None, train_seed: int = 0, **kw) -> UnlearnResult:
    """Dispatch by method name. EU uses ``arch``, ``hyper`` and ``train_seed``."""
    if method == EU:
        return exact_unlearn(md, arch or mo.arch, hyper, train_seed)
    if method == CF:
        return catastrophic_forget(mo, md, config, hyper)
    if method == SSD:
        return ssd_unlearn(mo, md, config, **kw)
    if method == BADT:
        return badt_unlearn(mo, md, config, hyper)
    if method == SCRUB:
        return scrub_unlearn(mo, md, config, hyper)
    raise ValueError(f"unknown method {method!r}")

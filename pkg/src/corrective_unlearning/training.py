"""Loss/gradient evaluation and the SGD-with-momentum training recipe."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .models import Model, forward

log = logging.getLogger(__name__)

LossFn = Callable[[T.Tensor, np.ndarray], T.Tensor]


def cross_entropy_loss(logits: T.Tensor, labels) -> T.Tensor:
    return T.cross_entropy(logits, labels)


def distill_loss(teacher_logits: np.ndarray, temperature: float = 1.0) -> LossFn:
    """Loss that pulls the student towards fixed teacher logits (labels unused)."""

    def fn(logits: T.Tensor, labels) -> T.Tensor:
        return T.kl_distill(logits, teacher_logits, temperature)

    return fn


def forward_backward(model: Model, inputs, labels, loss: LossFn = cross_entropy_loss) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its gradient w.r.t. every parameter of ``model``."""
    inputs = np.asarray(inputs, dtype=T.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    if len(inputs) != len(labels):
        raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
    tparams = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    out = loss(forward(model.arch, tparams, T.Tensor(inputs)), labels)
    value = out.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tparams.items()}
    return value, grads


def finite_diff_grad(model: Model, inputs, labels, loss: LossFn = cross_entropy_loss, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference estimate of the gradient returned by :func:`forward_backward`."""
    x = T.Tensor(np.asarray(inputs, dtype=T.DTYPE))
    labels = np.asarray(labels, dtype=np.int64)

    def value(params):
        return loss(forward(model.arch, {k: T.Tensor(v) for k, v in params.items()}, x), labels).item()

    return T.numeric_grad(value, model.params, eps)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    total_steps: int = 4000
    warmup_fraction: float = 0.01
    schedule: str = "linear"  # "linear" (warmup then decay to 0) or "constant"
    t_mult: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size <= 0 or self.total_steps <= 0:
            raise ValueError("batch_size and total_steps must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.t_mult is not None:
            log.warning("t_mult=%s accepted but ignored: schedule is warmup + single linear decay", self.t_mult)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.total_steps * self.warmup_fraction))

    def replace(self, **kw) -> TrainConfig:
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class OptimState:
    hyper: TrainConfig
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], hyper: TrainConfig) -> OptimState:
        return cls(hyper, {k: np.zeros_like(v) for k, v in params.items()})


def lr_at_step(state: OptimState) -> float:
    h = state.hyper
    if h.schedule == "constant":
        return h.learning_rate
    s, total, warm = state.step, h.total_steps, h.warmup_steps
    if s < warm:
        return h.learning_rate * s / warm
    if s >= total:
        return 0.0
    return h.learning_rate * (total - s) / (total - warm)


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """One momentum-SGD step with coupled weight decay, applied in place.

    ``v <- momentum * v + (grad + wd * param)``; ``param <- param - lr * v``.
    """
    if params.keys() != grads.keys() or params.keys() != state.velocity.keys():
        raise KeyError("params, grads and velocity must share the same keys")
    h = state.hyper
    lr = lr_at_step(state)
    for name, p in params.items():
        v = state.velocity[name]
        v *= h.momentum
        v += grads[name]
        if h.weight_decay:
            v += h.weight_decay * p
        p -= lr * v
    state.step += 1
    return params, state


class BatchStream:
    """Endless mini-batches of indices drawn epoch-by-epoch without replacement."""

    def __init__(self, indices, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ValueError("cannot draw batches from an empty index set")
        self.batch_size = min(batch_size, self.indices.size)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def train_model(model: Model, inputs: np.ndarray, labels: np.ndarray, hyper: TrainConfig, seed: int, steps: int | None = None) -> Model:
    """Run the training recipe on a copy of ``model`` and return it.

    ``steps`` defaults to ``hyper.total_steps``; the schedule always spans
    ``hyper.total_steps``.
    """
    model = model.copy()
    rng = np.random.default_rng(seed)
    stream = BatchStream(np.arange(len(labels)), hyper.batch_size, rng)
    state = OptimState.for_params(model.params, hyper)
    for _ in range(hyper.total_steps if steps is None else steps):
        idx = stream.next()
        _, grads = forward_backward(model, inputs[idx], labels[idx])
        sgd_update(model.params, grads, state)
    return model

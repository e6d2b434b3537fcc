"""Fast invariant checks shared by the ``selftest`` verb and the test suite.

Each check returns a :class:`Check`; none of them trains a full model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Split
from .evaluation import clean_label_accuracy, deletion_change, selection_score
from .methods import fim_diag, ssd_dampen
from .models import Arch, Model, build_model, flatten_params
from .training import finite_diff_grad, forward_backward


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def micro_models(count: int = 20, seed: int = 0):
    """Yield ``(model, x, y)`` triples alternating small MLPs and CNNs."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        if i % 2 == 0:
            arch = Arch(kind="mlp", input_shape=(1, 3, 3), hidden=(int(rng.integers(3, 7)),), num_classes=3)
        else:
            arch = Arch(kind="cnn", input_shape=(1, 4, 4), channels=(2,), hidden=(), num_classes=3)
        model = build_model(arch, int(rng.integers(2**31)))
        x = rng.normal(size=(int(rng.integers(2, 6)),) + arch.input_shape)
        y = rng.integers(0, arch.num_classes, size=len(x))
        yield model, x, y


def relative_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return np.abs(a - b) / denom


def check_gradients(count: int = 20, tol: float = 1e-4, quantile: float = 0.99) -> Check:
    worst = []
    for model, x, y in micro_models(count):
        _, g = forward_backward(model, x, y)
        n = finite_diff_grad(model, x, y, eps=1e-6)
        idx = flatten_params(model)[1]
        rel = relative_errors(idx.flatten(g), idx.flatten(n))
        worst.append(float(np.mean(rel <= tol)))
    frac = min(worst)
    return Check("gradient oracle", frac >= quantile, f"min fraction within {tol:g}: {frac:.4f}")


def brute_force_fim(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean of squared single-sample gradients, one backward pass per sample."""
    idx = flatten_params(model)[1]
    acc = np.zeros(idx.size)
    for i in range(len(y)):
        _, g = forward_backward(model, x[i : i + 1], y[i : i + 1])
        v = idx.flatten(g)
        acc += v * v
    return acc / len(y)


def check_fim(tol: float = 1e-10) -> Check:
    rng = np.random.default_rng(7)
    worst = 0.0
    archs = [
        Arch(kind="mlp", input_shape=(1, 2, 4), hidden=(6,), num_classes=4),
        Arch(kind="cnn", input_shape=(1, 4, 4), channels=(2,), hidden=(), num_classes=3),
    ]
    for arch in archs:
        model = build_model(arch, 3)
        assert model.num_params <= 100
        x = rng.normal(size=(9,) + arch.input_shape)
        y = rng.integers(0, arch.num_classes, size=9)
        fast = fim_diag(model, x, y, chunk=4)
        slow = brute_force_fim(model, x, y)
        worst = max(worst, float(np.max(relative_errors(fast, slow))))
    return Check("fim oracle", worst <= tol, f"max relative error {worst:.2e}")


def _basis_split(labels) -> Split:
    """One basis-vector input per label, so a linear model can predict anything per row."""
    labels = np.asarray(labels)
    return Split(np.eye(10)[: len(labels), None, None, :], labels)


def _lookup_model(preds) -> Model:
    """Linear model mapping the i-th basis vector to class ``preds[i]``."""
    arch = Arch(kind="mlp", input_shape=(1, 1, 10), hidden=(), num_classes=10)
    w = np.zeros((10, 10))
    w[np.arange(len(preds)), preds] = 1.0
    return Model(arch, {"head.weight": w, "head.bias": np.zeros(10)})


def metric_fixture_values() -> dict[str, tuple[float, float]]:
    """``{case: (computed, hand value)}`` on fixed 10-sample (or smaller) fixtures."""
    labels = np.arange(10)
    out = {}
    out["accuracy all correct"] = (clean_label_accuracy(_lookup_model(labels), _basis_split(labels)), 1.0)
    out["accuracy constant class"] = (clean_label_accuracy(_lookup_model([4] * 10), _basis_split(labels)), 0.1)
    out["accuracy 3 of 4"] = (clean_label_accuracy(_lookup_model([0, 1, 2, 0]), _basis_split([0, 1, 2, 3])), 0.75)
    out["deletion memorized"] = (deletion_change(_lookup_model(labels), _basis_split(labels)), 0.0)
    out["deletion all differ"] = (deletion_change(_lookup_model((labels + 1) % 10), _basis_split(labels)), 1.0)
    out["deletion 3 of 10"] = (deletion_change(_lookup_model([0, 1, 2, 3, 4, 5, 6, 0, 0, 0]), _basis_split(labels)), 0.3)
    out["score equal weights"] = (selection_score(0.8, 0.6, 0.5), 0.7)
    out["score w=0"] = (selection_score(0.8, 0.6, 0.0), 0.6)
    out["score w=1"] = (selection_score(0.8, 0.6, 1.0), 0.8)
    return out


def check_metrics() -> Check:
    bad = [k for k, (got, want) in metric_fixture_values().items() if got != want]
    return Check("metric fixtures", not bad, ", ".join(bad))


def check_ssd_properties() -> Check:
    rng = np.random.default_rng(11)
    p = rng.normal(size=200)
    d = rng.uniform(0.5, 1.5, size=200)
    f = rng.uniform(0.0, 0.4, size=200)
    problems = []
    out, sel = ssd_dampen(p, d, f, alpha=1.0, gamma=1.0)
    if sel.any() or out.tobytes() != p.tobytes():
        problems.append("empty selection changed weights")
    f2 = d * 2.0
    out, sel = ssd_dampen(p, d, f2, alpha=1.0, gamma=10.0)
    if not sel.all() or out.tobytes() != p.tobytes():
        problems.append("capped beta changed weights")
    out, sel = ssd_dampen(p, d, d * 10.0, alpha=1.0, gamma=1.0)
    if not np.allclose(out, p * 0.1, rtol=0, atol=1e-15):
        problems.append("beta=0.1 not applied")
    return Check("ssd no-op and cap", not problems, ", ".join(problems))


def run_all() -> list[Check]:
    return [check_gradients(), check_fim(), check_metrics(), check_ssd_properties()]

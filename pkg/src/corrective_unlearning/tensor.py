"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the benchmark models need are provided: dense and 3x3
convolutional layers, ReLU, 2x2 max pooling, reshapes, and the two losses
(cross-entropy and teacher-student KL). Parameter-consuming layers can also
emit per-sample gradients, which is what the Fisher diagonal needs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """A node in the computation graph.

    ``grad`` is filled by :meth:`backward`. When backward runs with
    ``per_sample=True``, weights and biases fed through :func:`linear` or
    :func:`conv2d` also receive ``grad_sq``: the sum over the batch of the
    squared per-sample gradients. This is only meaningful when the loss is a
    sum of per-sample terms.
    """

    __slots__ = ("data", "grad", "grad_sq", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple[Tensor, ...] = (),
        backward: Callable | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.grad_sq: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, per_sample: bool = False) -> None:
        """Backpropagate from this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad, per_sample)

    # arithmetic used by toy losses and tests
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, per_sample):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, per_sample):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g, per_sample):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g, per_sample):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g, per_sample):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data + b.data

    def backward(g, per_sample):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
            if per_sample:
                # sum_n (x_ni g_no)^2 without materializing per-sample grads
                w.grad_sq = (x.data * x.data).T @ (g * g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
            if per_sample:
                b.grad_sq = (g * g).sum(axis=0)

    return _result(out, (x, w, b), backward)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: (N, h+k-1, w+k-1, C) -> (N, h*w, C*k*k), columns ordered (C, ky, kx)
    n, c = xp.shape[0], xp.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.reshape(n, h * w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution in channels-last layout.

    ``x``: (N, H, W, C); ``w``: (O, C, k, k) with k odd; output (N, H, W, O).
    """
    n, h, wd, c = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T + b.data).reshape(n, h, wd, o)

    def backward(g, per_sample):
        g2 = g.reshape(n, h * wd, o)
        if w.requires_grad:
            w._accumulate((g2.reshape(-1, o).T @ cols.reshape(n * h * wd, -1)).reshape(w.shape))
            if per_sample:
                gs = np.matmul(g2.transpose(0, 2, 1), cols)
                w.grad_sq = np.einsum("nok,nok->ok", gs, gs).reshape(w.shape)
        if b.requires_grad:
            bs = g2.sum(axis=1)
            b._accumulate(bs.sum(axis=0))
            if per_sample:
                b.grad_sq = (bs * bs).sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, wd, c, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + h, j : j + wd, :] += dcols[..., i, j]
            x._accumulate(dxp[:, pad : pad + h, pad : pad + wd, :])

    return _result(out, (x, w, b), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (N, H, W, C); H and W must be even.

    Gradient goes to the first maximal element of each window.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d: spatial dims must be even, got {(h, w)}")
    quads = [x.data[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g, per_sample):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (i, j) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, i::2, j::2, :] = g * hit
        x._accumulate(gx)

    return _result(out, (x,), backward)


def to_channels_last(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H, W, C)."""

    def backward(g, per_sample):
        x._accumulate(g.transpose(0, 3, 1, 2))

    return _result(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), (x,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return labels


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``reduction`` is ``"mean"`` or ``"sum"``."""
    labels = _check_labels(logits, labels)
    n = labels.size
    lsm = log_softmax(logits.data)
    per = -lsm[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0

    def backward(g, per_sample):
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(d * (scale * g))

    return _result(np.asarray(per.sum() * scale), (logits,), backward)


def kl_distill(student: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """Mean over rows of KL(softmax(teacher) || softmax(student)).

    The teacher side is a constant array; only the student receives gradient.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=DTYPE)
    if teacher_logits.shape != student.shape or student.data.ndim != 2:
        raise ValueError(f"kl_distill: shape mismatch {student.shape} vs {teacher_logits.shape}")
    n = student.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t_lsm = log_softmax(teacher_logits / temperature)
    s_lsm = log_softmax(student.data / temperature)
    t_p = np.exp(t_lsm)
    value = float((t_p * (t_lsm - s_lsm)).sum()) / n

    def backward(g, per_sample):
        student._accumulate((np.exp(s_lsm) - t_p) * (g / (n * temperature)))

    return _result(np.asarray(max(value, 0.0)), (student,), backward)


def kl_distill_loss(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    """Value-only KL(teacher || student) averaged over rows."""
    return kl_distill(Tensor(student_logits), teacher_logits, temperature).item()


def numeric_grad(fn: Callable[[dict[str, np.ndarray]], float], params: Mapping[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``fn`` at ``params`` (not modified)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(work)
            flat[i] = orig - eps
            lo = fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = g
    return out


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))

"""Desk-scale classifiers with a flat parameter registry."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

MLP = "mlp"
CNN = "cnn"


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor.

    ``kind="mlp"`` flattens the input and applies ``hidden`` dense ReLU layers.
    ``kind="cnn"`` applies one 3x3 conv + ReLU + 2x2 max-pool block per entry
    of ``channels``, then the ``hidden`` dense layers, then the linear head.
    """

    kind: str = MLP
    input_shape: tuple[int, ...] = (1, 16, 16)
    num_classes: int = 10
    hidden: tuple[int, ...] = (256, 256)
    channels: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))
        if self.kind not in (MLP, CNN):
            raise ValueError(f"unknown arch kind {self.kind!r}")
        sizes = self.input_shape + self.hidden + (self.num_classes,)
        if self.kind == CNN:
            sizes += self.channels
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {self}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.kind == CNN:
            if len(self.input_shape) != 3:
                raise ValueError("cnn input_shape must be (C, H, W)")
            _, h, w = self.input_shape
            div = 2 ** len(self.channels)
            if h % div or w % div:
                raise ValueError(f"cnn input {h}x{w} not divisible by pooling factor {div}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == CNN:
            c, h, w = self.input_shape
            for i, out in enumerate(self.channels):
                shapes[f"conv{i}.weight"] = (out, c, 3, 3)
                shapes[f"conv{i}.bias"] = (out,)
                c, h, w = out, h // 2, w // 2
            width = c * h * w
        else:
            width = int(np.prod(self.input_shape))
        for i, out in enumerate(self.hidden):
            shapes[f"fc{i}.weight"] = (width, out)
            shapes[f"fc{i}.bias"] = (out,)
            width = out
        shapes["head.weight"] = (width, self.num_classes)
        shapes["head.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Arch:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Model:
    arch: Arch
    params: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> Model:
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, self.seed, dict(self.meta))

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, inputs) -> T.Tensor:
        """Logits without gradient tracking."""
        return forward(self.arch, {k: T.Tensor(v) for k, v in self.params.items()}, T._wrap(inputs))


def build_model(arch: Arch, seed: int) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, one seeded stream per model."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        # bias uses the fan-in of the weight that precedes it
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(arch, params, int(seed))


def forward(arch: Arch, params: dict[str, T.Tensor], x: T.Tensor) -> T.Tensor:
    n = x.shape[0]
    if x.shape[1:] != arch.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match arch {arch.input_shape}")
    h = x
    if arch.kind == CNN:
        h = T.to_channels_last(h)
        for i in range(len(arch.channels)):
            h = T.max_pool2d(T.relu(T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])))
    h = T.reshape(h, (n, -1))
    for i in range(len(arch.hidden)):
        h = T.relu(T.linear(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
    return T.linear(h, params["head.weight"], params["head.bias"])


def predict(model: Model, inputs, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, labels); ties go to the lowest class index."""
    inputs = np.asarray(inputs, dtype=T.DTYPE)
    parts = [model.forward(inputs[i : i + chunk]).data for i in range(0, len(inputs), chunk)]
    if parts:
        logits = np.concatenate(parts)
    else:
        logits = np.zeros((0, model.arch.num_classes))
    return logits, logits.argmax(axis=1)


class ParamIndex:
    """Bijection between flat coordinates [0, P) and (name, offset)."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.names = list(shapes)
        self.shapes = dict(shapes)
        sizes = [int(np.prod(s)) for s in shapes.values()]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.size = int(self.offsets[-1])

    def locate(self, i: int) -> tuple[str, int]:
        if not 0 <= i < self.size:
            raise IndexError(i)
        k = int(np.searchsorted(self.offsets, i, side="right")) - 1
        return self.names[k], int(i - self.offsets[k])

    def flat_index(self, name: str, offset: int) -> int:
        k = self.names.index(name)
        if not 0 <= offset < self.offsets[k + 1] - self.offsets[k]:
            raise IndexError((name, offset))
        return int(self.offsets[k] + offset)

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[n], dtype=T.DTYPE).reshape(-1) for n in self.names])

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=T.DTYPE)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector has length {vec.size}, expected {self.size}")
        return {
            n: vec[self.offsets[k] : self.offsets[k + 1]].reshape(self.shapes[n]).copy()
            for k, n in enumerate(self.names)
        }


def flatten_params(model: Model) -> tuple[np.ndarray, ParamIndex]:
    index = ParamIndex({k: v.shape for k, v in model.params.items()})
    return index.flatten(model.params), index


def unflatten_params(model: Model, vec: np.ndarray, index: ParamIndex | None = None) -> Model:
    """New model with the template's arch and seed and parameters from ``vec``."""
    index = index or ParamIndex({k: v.shape for k, v in model.params.items()})
    return Model(model.arch, index.unflatten(vec), model.seed, dict(model.meta))


# Checkpoint layout (little-endian):
#   8 bytes   magic b"CUMODEL1"
#   4 bytes   uint32 header length L
#   L bytes   UTF-8 JSON {"arch": {...}, "seed": int, "num_params": P, "names": [...], "shapes": [...], "meta": {...}}
#   8*P bytes float64 flat parameter vector in ParamIndex order
CHECKPOINT_MAGIC = b"CUMODEL1"


def save_model(model: Model, path) -> None:
    vec, index = flatten_params(model)
    header = {
        "arch": model.arch.to_dict(),
        "seed": int(model.seed),
        "num_params": index.size,
        "names": index.names,
        "shapes": [list(index.shapes[n]) for n in index.names],
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(vec.astype("<f8").tobytes())


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    vec = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(T.DTYPE)
    if vec.size != header["num_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    index = ParamIndex({n: tuple(s) for n, s in zip(header["names"], header["shapes"])})
    return Model(Arch.from_dict(header["arch"]), index.unflatten(vec), header["seed"], header.get("meta", {}))

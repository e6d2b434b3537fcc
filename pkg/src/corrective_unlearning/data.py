"""Synthetic image-like datasets, the two manipulations, and forget-set sampling."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

POISON = "poison"
IC = "ic"


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 10
    shape: tuple[int, int, int] = (1, 16, 16)
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    noise_sigma: float = 0.25
    template_grid: int = 4
    # classes sharing a base template; their deltas are scaled by (1 - pair_overlap)
    confusable_pair: tuple[int, int] | None = (3, 5)
    pair_overlap: float = 0.85
    # frame of ``margin`` pixels around each template held at ``background``;
    # values below 0 keep the clamped frame mostly black despite the noise
    margin: int = 1
    background: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.confusable_pair is not None:
            object.__setattr__(self, "confusable_pair", tuple(int(c) for c in self.confusable_pair))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for n in (self.n_train, self.n_val, self.n_test):
            if n < self.num_classes:
                raise ValueError(f"split size {n} smaller than num_classes {self.num_classes}")
        if len(self.shape) != 3 or min(self.shape) <= 0:
            raise ValueError(f"shape must be positive (C, H, W), got {self.shape}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.pair_overlap < 1:
            raise ValueError("pair_overlap must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Split:
    x: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Split:
        return Split(self.x[idx], self.y[idx])


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int
    seed: int
    config: GenConfig = field(default_factory=GenConfig)
    templates: np.ndarray | None = None


def make_templates(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Blocky random patterns, one per class, upsampled from a coarse grid."""
    c, h, w = cfg.shape
    g = cfg.template_grid
    coarse = rng.uniform(0.0, 1.0, size=(cfg.num_classes, c, g, g))
    if cfg.confusable_pair is not None:
        a, b = cfg.confusable_pair
        shared = 0.5 * (coarse[a] + coarse[b])
        coarse[a] = shared + (1 - cfg.pair_overlap) * (coarse[a] - shared)
        coarse[b] = shared + (1 - cfg.pair_overlap) * (coarse[b] - shared)
    reps = (-(-h // g), -(-w // g))
    up = np.kron(coarse, np.ones(reps))[..., :h, :w]
    if cfg.margin:
        m = cfg.margin
        inner = np.zeros((h, w), dtype=bool)
        inner[m : h - m, m : w - m] = True
        up = np.where(inner, up, cfg.background)
    return up


def generate_dataset(cfg: GenConfig = GenConfig(), seed: int = 0) -> Dataset:
    """Class templates plus clipped Gaussian noise; classes balanced per split."""
    rng = np.random.default_rng(seed)
    templates = make_templates(cfg, rng)

    def draw(n: int) -> Split:
        y = np.arange(n, dtype=np.int64) % cfg.num_classes
        y = rng.permutation(y)
        x = templates[y] + cfg.noise_sigma * rng.standard_normal((n,) + cfg.shape)
        return Split(np.clip(x, 0.0, 1.0), y)

    train, val, test = draw(cfg.n_train), draw(cfg.n_val), draw(cfg.n_test)
    return Dataset(train, val, test, cfg.num_classes, int(seed), cfg, templates)


def trigger_pixels(height: int, width: int) -> list[tuple[int, int]]:
    """max(1, ceil(0.3% of H*W)) pixel coordinates packed into the bottom-right corner."""
    count = max(1, -(-3 * height * width // 1000))
    qh, qw = height - height // 2, width - width // 2
    if count > qh * qw:
        raise ValueError("trigger does not fit in the bottom-right quadrant")
    coords = [(height - 1 - dr, width - 1 - dc) for dr in range(qh) for dc in range(qw)]
    coords.sort(key=lambda rc: (max(height - 1 - rc[0], width - 1 - rc[1]), height - 1 - rc[0], width - 1 - rc[1]))
    return coords[:count]


def apply_trigger(x: np.ndarray, pixels) -> np.ndarray:
    out = np.array(x, copy=True)
    rows, cols = zip(*pixels)
    out[..., list(rows), list(cols)] = 1.0
    return out


@dataclass(frozen=True)
class ManipulationSpec:
    kind: str
    n: int
    seed: int = 0
    target_class: int = 0
    class_a: int = 3
    class_b: int = 5

    def __post_init__(self):
        if self.kind not in (POISON, IC):
            raise ValueError(f"unknown manipulation kind {self.kind!r}")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.kind == IC:
            if self.class_a == self.class_b:
                raise ValueError("class_a and class_b must differ")
            if self.n % 2:
                raise ValueError("interclass confusion needs an even n")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ManipulatedDataset:
    base: Dataset
    train: Split  # training split as the developer sees it
    manipulated: np.ndarray  # bool (N_train,)
    original_labels: np.ndarray  # int64 (N_train,)
    in_forget_set: np.ndarray  # bool (N_train,)
    spec: ManipulationSpec
    trigger: tuple[tuple[int, int], ...] = ()

    @property
    def val(self) -> Split:
        return self.base.val

    @property
    def test(self) -> Split:
        return self.base.test

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    @property
    def manip_idx(self) -> np.ndarray:
        return np.flatnonzero(self.manipulated)

    @property
    def forget_idx(self) -> np.ndarray:
        return np.flatnonzero(self.in_forget_set)

    @property
    def retain_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.in_forget_set)

    def forget_split(self) -> Split:
        return self.train.subset(self.forget_idx)

    def retain_split(self) -> Split:
        return self.train.subset(self.retain_idx)


def _fresh(dataset) -> Dataset:
    if isinstance(dataset, ManipulatedDataset):
        raise TypeError("manipulations apply to a clean Dataset; generate a fresh one")
    return dataset


def apply_badnet(dataset: Dataset, spec: ManipulationSpec) -> ManipulatedDataset:
    """Stamp the trigger on ``spec.n`` random train samples and relabel them to the target class."""
    dataset = _fresh(dataset)
    if spec.kind != POISON:
        raise ValueError("apply_badnet needs a poison spec")
    ntr = len(dataset.train)
    if spec.n > ntr:
        raise ValueError(f"cannot poison {spec.n} of {ntr} training samples")
    _, h, w = dataset.train.x.shape[1:]
    pixels = tuple(trigger_pixels(h, w))
    idx = np.random.default_rng(spec.seed).choice(ntr, size=spec.n, replace=False)
    x, y = dataset.train.x.copy(), dataset.train.y.copy()
    if spec.n:
        x[idx] = apply_trigger(x[idx], pixels)
        y[idx] = spec.target_class
    mask = np.zeros(ntr, dtype=bool)
    mask[idx] = True
    return ManipulatedDataset(dataset, Split(x, y), mask, dataset.train.y.copy(), np.zeros(ntr, dtype=bool), spec, pixels)


def apply_interclass_confusion(dataset: Dataset, spec: ManipulationSpec) -> ManipulatedDataset:
    """Swap labels of n/2 random samples of class A with n/2 of class B."""
    dataset = _fresh(dataset)
    if spec.kind != IC:
        raise ValueError("apply_interclass_confusion needs an IC spec")
    rng = np.random.default_rng(spec.seed)
    y = dataset.train.y.copy()
    half = spec.n // 2
    picks = []
    for cls in (spec.class_a, spec.class_b):
        pool = np.flatnonzero(dataset.train.y == cls)
        if pool.size < half:
            raise ValueError(f"class {cls} has {pool.size} samples, need {half}")
        picks.append(rng.choice(pool, size=half, replace=False))
    y[picks[0]] = spec.class_b
    y[picks[1]] = spec.class_a
    mask = np.zeros(len(y), dtype=bool)
    mask[np.concatenate(picks)] = True
    return ManipulatedDataset(dataset, Split(dataset.train.x.copy(), y), mask, dataset.train.y.copy(), np.zeros(len(y), dtype=bool), spec)


def manipulate(dataset: Dataset, spec: ManipulationSpec) -> ManipulatedDataset:
    if spec.kind == POISON:
        return apply_badnet(dataset, spec)
    return apply_interclass_confusion(dataset, spec)


def sample_forget_set(md: ManipulatedDataset, fraction: float, seed: int) -> ManipulatedDataset:
    """Flag round(fraction * |S_m|) manipulated samples as identified; earlier flags are discarded."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    manip = md.manip_idx
    if manip.size == 0:
        raise ValueError("dataset has no manipulated samples")
    k = int(np.floor(fraction * manip.size + 0.5))
    chosen = np.random.default_rng(seed).choice(manip, size=k, replace=False)
    flags = np.zeros_like(md.in_forget_set)
    flags[chosen] = True
    return replace(md, in_forget_set=flags)


@dataclass
class AffectedDomainSets:
    dm_test: Split
    utility_test: Split
    sm_clean: Split


def build_affected_sets(md: ManipulatedDataset) -> AffectedDomainSets:
    test = md.test
    manip = md.manip_idx
    sm_clean = Split(md.train.x[manip], md.original_labels[manip])
    if md.spec.kind == POISON:
        dm = Split(apply_trigger(test.x, md.trigger), test.y.copy())
        util = Split(test.x.copy(), test.y.copy())
    else:
        in_pair = np.isin(test.y, (md.spec.class_a, md.spec.class_b))
        dm = test.subset(in_pair)
        util = test.subset(~in_pair)
    return AffectedDomainSets(dm, util, sm_clean)


# Dataset container layout (little-endian):
#   8 bytes   magic b"CUDATA01"
#   4 bytes   uint32 header length L
#   L bytes   UTF-8 JSON header: dims [C, H, W], counts {train, val, test}, num_classes,
#             seed, gen_config, manipulation (spec dict or null), trigger pixel list
#   body      float64 samples: train (as seen by the developer), val, test
#             int64 labels: train, val, test
#   provenance (only when manipulation is not null), per train sample:
#             uint8 manipulated, int64 original_label, uint8 in_forget_set,
#             then float64 clean features of the manipulated rows in index order
DATASET_MAGIC = b"CUDATA01"


def save_dataset(ds: Dataset | ManipulatedDataset, path) -> None:
    md = ds if isinstance(ds, ManipulatedDataset) else None
    base = md.base if md else ds
    train = md.train if md else base.train
    splits = (train, base.val, base.test)
    header = {
        "dims": list(train.x.shape[1:]),
        "counts": {"train": len(train), "val": len(base.val), "test": len(base.test)},
        "num_classes": base.num_classes,
        "seed": base.seed,
        "gen_config": asdict(base.config),
        "manipulation": md.spec.to_dict() if md else None,
        "trigger": [list(p) for p in md.trigger] if md else [],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for s in splits:
            fh.write(s.x.astype("<f8").tobytes())
        for s in splits:
            fh.write(s.y.astype("<i8").tobytes())
        if md:
            fh.write(md.manipulated.astype("u1").tobytes())
            fh.write(md.original_labels.astype("<i8").tobytes())
            fh.write(md.in_forget_set.astype("u1").tobytes())
            fh.write(base.train.x[md.manip_idx].astype("<f8").tobytes())


def load_dataset(path) -> Dataset | ManipulatedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    pos = 12 + hlen
    dims = tuple(header["dims"])
    feat = int(np.prod(dims))
    counts = [header["counts"][k] for k in ("train", "val", "test")]

    def take(dtype, count):
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        arr = np.frombuffer(raw[pos : pos + size], dtype=dtype)
        if arr.size != count:
            raise ValueError(f"{path}: truncated body")
        pos += size
        return arr

    xs = [take("<f8", n * feat).reshape((n,) + dims).astype(np.float64) for n in counts]
    ys = [take("<i8", n).astype(np.int64) for n in counts]
    cfg = GenConfig.from_dict(header["gen_config"])
    spec = header["manipulation"]
    if spec is None:
        return Dataset(Split(xs[0], ys[0]), Split(xs[1], ys[1]), Split(xs[2], ys[2]), header["num_classes"], header["seed"], cfg)
    ntr = counts[0]
    manipulated = take("u1", ntr).astype(bool)
    original = take("<i8", ntr).astype(np.int64)
    forget = take("u1", ntr).astype(bool)
    idx = np.flatnonzero(manipulated)
    clean_x = xs[0].copy()
    clean_x[idx] = take("<f8", idx.size * feat).reshape((idx.size,) + dims)
    base = Dataset(Split(clean_x, original.copy()), Split(xs[1], ys[1]), Split(xs[2], ys[2]), header["num_classes"], header["seed"], cfg)
    trigger = tuple(tuple(p) for p in header["trigger"])
    return ManipulatedDataset(base, Split(xs[0], ys[0]), manipulated, original, forget, ManipulationSpec(**spec), trigger)

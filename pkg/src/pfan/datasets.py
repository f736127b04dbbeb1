"""Labeled source / unlabeled target domain pairs.

Two seeded synthetic generators with a controllable shift and a reader for
the IDX container used by MNIST and (pre-converted) USPS.

Target labels are never placed on ``DomainDataset.labels``. They ride along
in a private slot that only :func:`pfan.evaluation.oracle_labels` reads, so
every training path sees a label-stripped view by construction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import make_rng

IDX_LABEL_MAGIC = 2049
IDX_IMAGE_MAGIC = 2051


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str
    class_count: int
    _truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("feature rows must be finite")
        if self.domain not in ("source", "target"):
            raise DatasetError(f"unknown domain tag {self.domain!r}")
        for lab in (self.labels, self._truth):
            if lab is not None:
                lab = np.asarray(lab)
                if lab.shape != (len(self.features),):
                    raise DatasetError("one label per row required")
                if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
                    raise DatasetError(f"labels must lie in [0, {self.class_count})")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self._truth is not None:
            self._truth = np.asarray(self._truth, dtype=np.int64)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        lab = self.labels if self.labels is not None else self._truth
        if lab is None:
            raise DatasetError("no labels available")
        return np.bincount(lab, minlength=self.class_count)

    def take(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            _truth=None if self._truth is None else self._truth[idx],
        )

    def as_target(self) -> "DomainDataset":
        """Unlabeled target view; labels are moved into the evaluation slot."""
        truth = self.labels if self.labels is not None else self._truth
        return replace(self, labels=None, domain="target", _truth=truth)

    def with_features(self, features: np.ndarray) -> "DomainDataset":
        return replace(self, features=features)


@dataclass(frozen=True)
class SyntheticShiftSpec:
    class_count: int = 4
    input_dim: int = 2
    per_class: int = 100
    radius: float = 4.0
    rotation: float = 0.0  # radians, applied to target class means
    translation: tuple[float, ...] = ()
    noise: float = 0.5
    target_noise_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise DatasetError("need at least two classes")
        if not self.noise > 0 or not self.target_noise_scale > 0:
            raise DatasetError("noise standard deviation must be positive")
        if self.input_dim < 2:
            raise DatasetError("input_dim must be at least 2")
        if self.per_class < 1:
            raise DatasetError("per_class must be positive")
        if len(self.translation) not in (0, self.input_dim):
            raise DatasetError("translation must have input_dim entries")


def _rotation(angle: float, d: int) -> np.ndarray:
    # rotates the first coordinate plane, identity elsewhere
    R = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def class_means(spec: SyntheticShiftSpec) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.class_count) / spec.class_count
    means = np.zeros((spec.class_count, spec.input_dim))
    means[:, 0] = spec.radius * np.cos(angles)
    means[:, 1] = spec.radius * np.sin(angles)
    return means


def _draw(rng, means, per_class, sigma):
    C, d = means.shape
    y = np.repeat(np.arange(C), per_class)
    x = means[y] + sigma * rng.standard_normal((y.size, d))
    perm = rng.permutation(y.size)
    return x[perm], y[perm]


def gen_gaussian_shift(spec: SyntheticShiftSpec) -> tuple[DomainDataset, DomainDataset]:
    """Isotropic Gaussian classes on a circle; target means rotated and translated."""
    spec.validate()
    means = class_means(spec)
    shift = np.asarray(spec.translation or np.zeros(spec.input_dim), dtype=np.float64)
    t_means = means @ _rotation(spec.rotation, spec.input_dim).T + shift
    xs, ys = _draw(make_rng(spec.seed, "source"), means, spec.per_class, spec.noise)
    xt, yt = _draw(make_rng(spec.seed, "target"), t_means, spec.per_class,
                   spec.noise * spec.target_noise_scale)
    return (DomainDataset(xs, ys, "source", spec.class_count),
            DomainDataset(xt, None, "target", spec.class_count, _truth=yt))


def _moons(rng, per_class, sigma):
    t0 = rng.uniform(0.0, np.pi, per_class)
    t1 = rng.uniform(0.0, np.pi, per_class)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower]) + sigma * rng.standard_normal((2 * per_class, 2))
    y = np.repeat([0, 1], per_class)
    perm = rng.permutation(y.size)
    return x[perm], y[perm]


def gen_two_moons_shift(spec: SyntheticShiftSpec) -> tuple[DomainDataset, DomainDataset]:
    """Two interleaved half circles; the target cloud is rotated about the moons' centre."""
    spec.validate()
    if spec.class_count != 2 or spec.input_dim != 2:
        raise DatasetError("two moons is a 2-class, 2-D task")
    xs, ys = _moons(make_rng(spec.seed, "source"), spec.per_class, spec.noise)
    xt, yt = _moons(make_rng(spec.seed, "target"), spec.per_class,
                    spec.noise * spec.target_noise_scale)
    centre = np.array([0.5, 0.25])
    xt = (xt - centre) @ _rotation(spec.rotation, 2).T + centre
    if spec.translation:
        xt = xt + np.asarray(spec.translation)
    return (DomainDataset(xs, ys, "source", 2),
            DomainDataset(xt, None, "target", 2, _truth=yt))


def standardize(source: DomainDataset, target: DomainDataset) -> tuple[DomainDataset, DomainDataset]:
    """Scale both domains per dimension with source statistics only."""
    mu = source.features.mean(axis=0)
    sd = source.features.std(axis=0)
    sd[sd == 0] = 1.0
    return (source.with_features((source.features - mu) / sd),
            target.with_features((target.features - mu) / sd))


# --- IDX container --------------------------------------------------------

@dataclass
class IdxTensor:
    magic: int
    dims: tuple[int, ...]
    payload: bytes

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(raw: bytes) -> IdxTensor:
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError("magic must start with two zero bytes", 0)
    if raw[2] != 0x08:
        raise IdxFormatError(f"unsupported element type 0x{raw[2]:02x}, expected 0x08", 2)
    ndim = raw[3]
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_LABEL_MAGIC, IDX_IMAGE_MAGIC):
        raise IdxFormatError(f"magic {magic} is neither {IDX_LABEL_MAGIC} nor {IDX_IMAGE_MAGIC}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"header truncated, need {header} bytes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    got = len(raw) - header
    if got < expected:
        raise IdxFormatError(f"payload truncated: {got} of {expected} bytes", len(raw))
    if got > expected:
        raise IdxFormatError(f"{got - expected} trailing bytes after payload", header + expected)
    return IdxTensor(magic, tuple(dims), bytes(raw[header:]))


def load_idx(path) -> IdxTensor:
    return parse_idx(Path(path).read_bytes())


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, a.ndim]))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def decode_images(t: IdxTensor) -> np.ndarray:
    if t.magic != IDX_IMAGE_MAGIC or len(t.dims) != 3:
        raise IdxFormatError(f"not an image tensor (magic {t.magic}, {len(t.dims)} dims)", 0)
    n = t.dims[0]
    return t.array().reshape(n, -1).astype(np.float64) / 255.0


def decode_labels(t: IdxTensor) -> np.ndarray:
    if t.magic != IDX_LABEL_MAGIC or len(t.dims) != 1:
        raise IdxFormatError(f"not a label tensor (magic {t.magic}, {len(t.dims)} dims)", 0)
    return t.array().astype(np.int64)


def resize_bilinear(images: np.ndarray, side: int, out_side: int) -> np.ndarray:
    """Resize flattened square images with align-corners bilinear interpolation."""
    if side == out_side:
        return images
    imgs = images.reshape(-1, side, side)
    pos = np.linspace(0, side - 1, out_side)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, side - 1)
    w = pos - lo
    rows = imgs[:, lo, :] * (1 - w)[None, :, None] + imgs[:, hi, :] * w[None, :, None]
    out = rows[:, :, lo] * (1 - w)[None, None, :] + rows[:, :, hi] * w[None, None, :]
    return out.reshape(len(images), -1)


def load_digits(images_path, labels_path, domain: str = "source",
                side: int = 16) -> DomainDataset:
    x = decode_images(load_idx(images_path))
    y = decode_labels(load_idx(labels_path))
    if len(x) != len(y):
        raise DatasetError(f"{len(x)} images but {len(y)} labels")
    native = int(round(np.sqrt(x.shape[1])))
    x = resize_bilinear(x, native, side)
    ds = DomainDataset(x, y, "source", 10)
    return ds.as_target() if domain == "target" else ds


def subsample(ds: DomainDataset, n: int, seed: int) -> DomainDataset:
    if n > len(ds):
        raise DatasetError(f"cannot draw {n} rows from {len(ds)}")
    idx = make_rng(seed, "subsample").choice(len(ds), size=n, replace=False)
    return ds.take(idx)


def batch_iter(data, batch_size: int, seed) -> Iterator[np.ndarray]:
    """Index slices covering one shuffled epoch; the last batch may be short.

    ``data`` is a dataset or a row count; ``seed`` an int or a Generator.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = data if isinstance(data, (int, np.integer)) else len(data)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, "batches")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]

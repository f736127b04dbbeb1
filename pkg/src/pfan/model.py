"""Feature extractor G, label predictor F and domain discriminator D.

D sits behind a gradient reversal boundary: in the forward direction the
features pass through unchanged, in the backward direction the gradient
returned to G is multiplied by ``-lambda``.
"""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import LayerParams

SNAPSHOT_MAGIC = b"PFANSNAP"
SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    pass


def _stack_forward(layers, x, relu_last=True):
    cache = [x]
    h = x
    for i, p in enumerate(layers):
        a = nx.affine_forward(h, p)
        cache.append(a)
        h = nx.relu_forward(a) if (relu_last or i < len(layers) - 1) else a
        cache.append(h)
    return h, cache


def _stack_backward(layers, cache, grad, relu_last=True):
    for i in reversed(range(len(layers))):
        if relu_last or i < len(layers) - 1:
            grad = nx.relu_backward(cache[2 * i + 1], grad)
        grad = nx.affine_backward(cache[2 * i], layers[i], grad)
    return grad


class FeatureExtractor:
    """Stack of affine+ReLU layers mapping inputs to D-dimensional embeddings."""

    def __init__(self, layers: list[LayerParams]):
        self.layers = layers

    @classmethod
    def build(cls, widths, rng):
        return cls([LayerParams.glorot(a, b, rng) for a, b in zip(widths[:-1], widths[1:])])

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[1]

    def forward(self, x):
        return _stack_forward(self.layers, x)

    def backward(self, cache, grad):
        return _stack_backward(self.layers, cache, grad)


class LabelPredictor:
    def __init__(self, layer: LayerParams, temperature: float = 1.0):
        if not temperature > 0:
            raise nx.ParameterError("temperature must be positive")
        self.layer = layer
        self.temperature = temperature

    def logits(self, f):
        return nx.affine_forward(f, self.layer)

    def backward(self, f, grad_z):
        return nx.affine_backward(f, self.layer, grad_z)


class DomainDiscriminator:
    def __init__(self, layers: list[LayerParams]):
        self.layers = layers

    def forward(self, f):
        """Returns (logit column, cache); probabilities are ``sigmoid(logit)``."""
        return _stack_forward(self.layers, f, relu_last=False)

    def backward(self, cache, grad_logit):
        return _stack_backward(self.layers, cache, grad_logit, relu_last=False)


def grl_backward(grad_features: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise nx.ParameterError("lambda must be non-negative")
    return -lam * grad_features


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    class_count: int
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 16
    disc_hidden: int = 32


class PFANModel:
    def __init__(self, G: FeatureExtractor, F: LabelPredictor, D: DomainDiscriminator, step: int = 0):
        self.G, self.F, self.D = G, F, D
        self.step = step

    @classmethod
    def init(cls, arch: Architecture, seed: int, temperature: float = 1.0) -> "PFANModel":
        rng = nx.make_rng(seed, "init")
        widths = (arch.input_dim, *arch.hidden, arch.feature_dim)
        G = FeatureExtractor.build(widths, rng)
        F = LabelPredictor(LayerParams.glorot(arch.feature_dim, arch.class_count, rng), temperature)
        D = DomainDiscriminator([LayerParams.glorot(arch.feature_dim, arch.disc_hidden, rng),
                                 LayerParams.glorot(arch.disc_hidden, 1, rng)])
        return cls(G, F, D)

    @property
    def class_count(self) -> int:
        return self.F.layer.shape[1]

    def named_layers(self) -> list[tuple[str, LayerParams]]:
        out = [(f"G{i}", p) for i, p in enumerate(self.G.layers)]
        out.append(("F", self.F.layer))
        out += [(f"D{i}", p) for i, p in enumerate(self.D.layers)]
        return out

    def layers(self) -> list[LayerParams]:
        return [p for _, p in self.named_layers()]

    def zero_grad(self) -> None:
        for p in self.layers():
            p.zero_grad()

    def reset_momentum(self) -> None:
        for p in self.layers():
            p.momentum_weight.fill(0.0)
            p.momentum_bias.fill(0.0)

    def forward_features(self, x) -> np.ndarray:
        x = nx.as_matrix(x)
        if x.shape[1] != self.G.input_dim:
            raise nx.DimensionError(f"input dim {x.shape[1]} != model input dim {self.G.input_dim}")
        return self.G.forward(x)[0]

    def logits(self, x) -> np.ndarray:
        return self.F.logits(self.forward_features(x))

    def classify(self, features, T: float | None = None) -> np.ndarray:
        return nx.softmax_temperature(self.F.logits(features), self.F.temperature if T is None else T)

    def predict(self, x) -> np.ndarray:
        # argmax of raw logits; unaffected by temperature
        return np.argmax(self.logits(x), axis=1)

    def discriminate(self, features) -> np.ndarray:
        return nx.sigmoid(self.D.forward(nx.as_matrix(features))[0][:, 0])

    def copy(self) -> "PFANModel":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<I", self.step))
        for name, p in self.named_layers():
            h.update(name.encode())
            for arr in p.arrays().values():
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# --- snapshot file --------------------------------------------------------
#   8s magic | u32 version | u32 step | f64 temperature | u32 n_arrays
#   per array: u16 name length, name, u32 rows, u32 cols
#   payload: arrays in table order, little-endian float64

def _snapshot_arrays(model: PFANModel):
    out = []
    for name, p in model.named_layers():
        for key, arr in p.arrays().items():
            out.append((f"{name}.{key}", np.atleast_2d(arr)))
    return out


def save_snapshot(model: PFANModel, path) -> None:
    arrays = _snapshot_arrays(model)
    buf = bytearray(SNAPSHOT_MAGIC)
    buf += struct.pack("<IIdI", SNAPSHOT_VERSION, model.step, model.F.temperature, len(arrays))
    for name, arr in arrays:
        enc = name.encode()
        buf += struct.pack("<H", len(enc)) + enc + struct.pack("<II", *arr.shape)
    for _, arr in arrays:
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_snapshot(raw: bytes):
    if raw[:8] != SNAPSHOT_MAGIC:
        raise SnapshotError("not a snapshot file")
    version, step, temperature, n = struct.unpack_from("<IIdI", raw, 8)
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    off = 8 + struct.calcsize("<IIdI")
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        table.append((name, rows, cols))
    arrays = {}
    for name, rows, cols in table:
        size = rows * cols * 8
        if off + size > len(raw):
            raise SnapshotError("snapshot payload truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += size
    if off != len(raw):
        raise SnapshotError("trailing bytes in snapshot")
    return step, temperature, arrays


def _layer_from(arrays, name):
    w = arrays[f"{name}.weight"]
    p = LayerParams(w.copy(), arrays[f"{name}.bias"].reshape(-1).copy())
    p.momentum_weight[...] = arrays[f"{name}.momentum_weight"]
    p.momentum_bias[...] = arrays[f"{name}.momentum_bias"].reshape(-1)
    return p


def load_snapshot(path, like: PFANModel | None = None) -> PFANModel:
    """Read a snapshot; with ``like`` the stored shapes must match that model's."""
    step, temperature, arrays = _read_snapshot(Path(path).read_bytes())
    names = sorted({k.split(".")[0] for k in arrays})
    n_g = sum(1 for k in names if k.startswith("G"))
    n_d = sum(1 for k in names if k.startswith("D"))
    try:
        G = FeatureExtractor([_layer_from(arrays, f"G{i}") for i in range(n_g)])
        F = LabelPredictor(_layer_from(arrays, "F"), temperature)
        D = DomainDiscriminator([_layer_from(arrays, f"D{i}") for i in range(n_d)])
    except (KeyError, nx.DimensionError) as exc:
        raise SnapshotError(f"incomplete snapshot: {exc}") from exc
    model = PFANModel(G, F, D, step)
    if like is not None:
        want = [(n, p.shape) for n, p in like.named_layers()]
        got = [(n, p.shape) for n, p in model.named_layers()]
        if want != got:
            raise SnapshotError(f"architecture mismatch: snapshot {got}, model {want}")
    return model

"""Dense float64 layers, losses with analytic gradients, and SGD with momentum.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and shape
``(rows, cols)``. Every backward function here is hand-written so that the
whole training signal can be audited against finite differences.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MOMENTUM = 0.9


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def ensure_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite values in {what}")


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for a named sub-stream of ``seed``.

    PCG64 seeded through SeedSequence gives identical draws on every platform.
    Names are hashed with crc32 so that the mapping is stable across processes.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)
    momentum_weight: np.ndarray = field(init=False)
    momentum_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = as_matrix(self.weight)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[1]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} != weight cols {self.weight.shape[1]}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.momentum_weight = np.zeros_like(self.weight)
        self.momentum_bias = np.zeros_like(self.bias)

    @classmethod
    def glorot(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LayerParams":
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def zero_grad(self) -> None:
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "weight": self.weight,
            "bias": self.bias,
            "momentum_weight": self.momentum_weight,
            "momentum_bias": self.momentum_bias,
        }


def affine_forward(x, p: LayerParams) -> np.ndarray:
    x = as_matrix(x) if np.ndim(x) != 2 else np.asarray(x, dtype=np.float64)
    if x.shape[1] != p.weight.shape[0]:
        raise DimensionError(f"input has {x.shape[1]} columns, layer expects {p.weight.shape[0]}")
    return x @ p.weight + p.bias


def affine_backward(x: np.ndarray, p: LayerParams, grad_out: np.ndarray,
                    accumulate: bool = True) -> np.ndarray:
    """Backprop through ``x @ W + b``.

    Parameter gradients are added into ``p.grad_*`` (or overwritten when
    ``accumulate`` is false); the gradient with respect to ``x`` is returned.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (x.shape[0], p.weight.shape[1]) or x.shape[1] != p.weight.shape[0]:
        raise DimensionError(
            f"grad_out {grad_out.shape} incompatible with x {x.shape} and W {p.weight.shape}")
    gw = x.T @ grad_out
    gb = grad_out.sum(axis=0)
    if accumulate:
        p.grad_weight += gw
        p.grad_bias += gb
    else:
        p.grad_weight[...] = gw
        p.grad_bias[...] = gb
    return grad_out @ p.weight.T


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_temperature(z, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    z = np.asarray(z, dtype=np.float64)
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels) -> float:
    probs = as_matrix(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ParameterError(f"labels must lie in [0, {probs.shape[1]})")
    if labels.size == 0:
        return 0.0
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(picked)))


def softmax_cross_entropy(z: np.ndarray, labels, T: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean CE of ``softmax(z / T)`` and its gradient w.r.t. the logits.

    The log-probabilities are formed from shifted logits rather than from
    ``log(q)`` so that a saturated softmax never yields ``log(0)``.
    """
    z = as_matrix(z)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ParameterError(f"labels must lie in [0, {C})")
    if B == 0:
        return 0.0, np.zeros_like(z)
    s = z / T
    s = s - s.max(axis=1, keepdims=True)
    logq = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = float(-np.mean(logq[rows, labels]))
    grad = np.exp(logq)
    grad[rows, labels] -= 1.0
    grad /= T * B
    return loss, grad


def binary_cross_entropy_logits(logits: np.ndarray, target: float) -> tuple[float, np.ndarray]:
    """Mean BCE of ``sigmoid(logits)`` against a constant 0/1 target, plus d/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.size
    if n == 0:
        return 0.0, np.zeros_like(logits)
    # -log sigmoid(a) = softplus(-a); -log(1 - sigmoid(a)) = softplus(a)
    a = -logits if target == 1.0 else logits
    loss = float(np.mean(np.logaddexp(0.0, a)))
    grad = (sigmoid(logits) - target) / n
    return loss, grad


def sgd_momentum_step(p: LayerParams, lr: float, momentum: float = MOMENTUM) -> None:
    ensure_finite(p.grad_weight, "weight gradient")
    ensure_finite(p.grad_bias, "bias gradient")
    p.momentum_weight *= momentum
    p.momentum_weight += p.grad_weight
    p.momentum_bias *= momentum
    p.momentum_bias += p.grad_bias
    p.weight -= lr * p.momentum_weight
    p.bias -= lr * p.momentum_bias


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[int, int]]
    worst: tuple[int, int] | None = None

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], epsilon: float = 1e-6,
               kink_tol: float = 1e-2, floor: float = 1e-8,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``params`` are perturbed in place and restored. A coordinate whose two
    one-sided slopes disagree by more than ``kink_tol`` (relative) straddles a
    non-differentiable point and is reported in ``excluded`` instead of being
    scored.
    """
    worst_err, worst, n, excluded = 0.0, None, 0, []
    f0 = loss_fn()
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + epsilon
            fp = loss_fn()
            flat[i] = old - epsilon
            fm = loss_fn()
            flat[i] = old
            right, left = (fp - f0) / epsilon, (f0 - fm) / epsilon
            gap = abs(right - left)
            if gap > kink_tol * max(abs(right), abs(left)) and gap > 100 * epsilon:
                excluded.append((pi, int(i)))
                continue
            num = (fp - fm) / (2 * epsilon)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            n += 1
            if err > worst_err:
                worst_err, worst = err, (pi, int(i))
    return GradCheckResult(worst_err, n, excluded, worst)

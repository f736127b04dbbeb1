"""Adaptive prototype alignment.

Each side (source, target) keeps a global prototype per class. Every
iteration the mini-batch yields local prototypes; these are folded into a
running mean (the accumulated prototype) and the global is moved toward that
mean by the squared cosine similarity between the two:

    rho   = cos(accum_k, global_k)
    new_k = rho**2 * accum_k + (1 - rho**2) * global_k

The alignment loss is the summed squared distance between source and target
globals over classes that are valid on both sides.

Gradients flow only through the current batch's local prototypes. The
accumulated history and the previous globals are constants, which keeps
memory flat in the number of iterations.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ehts import NORM_EPS, class_sums, compute_prototypes


@dataclass
class SidePrototypes:
    glob: np.ndarray      # C x D, NaN rows where invalid
    valid: np.ndarray     # C bools
    accum: np.ndarray     # C x D running mean of locals seen this step
    n_local: np.ndarray   # per-class count of locals folded into accum

    @classmethod
    def from_prototypes(cls, protos) -> "SidePrototypes":
        C, D = protos.centroids.shape
        return cls(protos.centroids.copy(), protos.valid.copy(), np.zeros((C, D)),
                   np.zeros(C, dtype=np.int64))

    def copy(self) -> "SidePrototypes":
        return SidePrototypes(self.glob.copy(), self.valid.copy(), self.accum.copy(),
                              self.n_local.copy())


@dataclass
class GlobalPrototypeState:
    source: SidePrototypes
    target: SidePrototypes
    active: bool = True
    shared_rho: bool = False
    iteration: int = 0

    @property
    def class_count(self) -> int:
        return self.source.glob.shape[0]

    @property
    def active_classes(self) -> np.ndarray:
        return self.source.valid & self.target.valid

    def copy(self) -> "GlobalPrototypeState":
        return replace(self, source=self.source.copy(), target=self.target.copy())


def init_global(source_features, source_labels, target_features, pseudo_labels, C: int,
                shared_rho: bool = False) -> GlobalPrototypeState:
    src = compute_prototypes(source_features, source_labels, C, "source")
    tgt = compute_prototypes(target_features, pseudo_labels, C, "target-global")
    return GlobalPrototypeState(SidePrototypes.from_prototypes(src),
                                SidePrototypes.from_prototypes(tgt),
                                active=len(pseudo_labels) > 0, shared_rho=shared_rho)


def update_accumulated(accum: np.ndarray, local: np.ndarray, I: int) -> np.ndarray:
    """Running mean after folding in the I-th local prototype (I >= 1)."""
    if I < 1:
        raise ValueError("iteration counter starts at 1")
    return ((I - 1) * accum + local) / I


def _rho(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / ((na + NORM_EPS) * (nb + NORM_EPS))), na, nb


def adapt_global(accum: np.ndarray, prev: np.ndarray) -> tuple[np.ndarray, float]:
    rho = _rho(accum, prev)[0]
    w = rho * rho
    return w * accum + (1.0 - w) * prev, rho


def _adapt_vjp(a, b, g):
    """Gradient of <g, adapt_global(a, b)> with respect to a (b held fixed)."""
    rho, na, nb = _rho(a, b)
    da = na + NORM_EPS
    drho = b / (da * (nb + NORM_EPS))
    if na > 0:
        drho = drho - (a @ b) / (da * da * (nb + NORM_EPS)) * (a / na)
    return rho * rho * g + (g @ (a - b)) * 2.0 * rho * drho


def apa_loss(source_glob: np.ndarray, target_glob: np.ndarray, active: np.ndarray) -> float:
    diff = source_glob[active] - target_glob[active]
    return float(np.sum(diff * diff))


@dataclass
class ApaResult:
    loss: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    state: GlobalPrototypeState | None
    rho_source: np.ndarray
    rho_target: np.ndarray


def _advance_side(side: SidePrototypes, feats, labels, shared_rho):
    """Fold this batch into one side; returns new side, rho per class and the
    pieces the backward pass needs."""
    C = side.glob.shape[0]
    sums, counts = class_sums(feats, labels, C)
    present = np.flatnonzero(counts)
    new = side.copy()
    rho = np.full(C, np.nan)
    local = sums[present] / counts[present, None]
    I = side.n_local[present] + 1
    accum = ((I - 1)[:, None] * side.accum[present] + local) / I[:, None]
    new.accum[present] = accum
    new.n_local[present] = I
    had_prev = side.valid[present]
    prev = np.where(had_prev[:, None], side.glob[present], accum)
    blocks = [np.flatnonzero(had_prev)] if shared_rho else [[i] for i in np.flatnonzero(had_prev)]
    out = accum.copy()
    for blk in blocks:
        if len(blk) == 0:
            continue
        a, b = accum[blk].ravel(), prev[blk].ravel()
        c_new, r = adapt_global(a, b)
        out[blk] = c_new.reshape(len(blk), -1)
        rho[present[blk]] = r
    new.glob[present] = out
    new.valid[present] = True
    return new, rho, (present, counts, I, accum, prev, blocks)


def _backward_side(grad_glob, labels, ctx, n_rows, D):
    present, counts, I, accum, prev, blocks = ctx
    g_acc = grad_glob[present].copy()  # classes without a previous global: new = accum
    for blk in blocks:
        if len(blk) == 0:
            continue
        a, b = accum[blk].ravel(), prev[blk].ravel()
        g = grad_glob[present[blk]].ravel()
        g_acc[blk] = _adapt_vjp(a, b, g).reshape(len(blk), -1)
    C = grad_glob.shape[0]
    g_local = np.zeros((C, D))
    g_local[present] = g_acc / I[:, None]
    g_rows = np.zeros((n_rows, D))
    per_sample = np.zeros((C, D))
    per_sample[present] = g_local[present] / counts[present, None]
    if n_rows:
        g_rows = per_sample[labels]
    return g_rows


def apa_step(state: GlobalPrototypeState, fs, ys, ft, yt) -> ApaResult:
    """Fold the batch into the global prototypes and evaluate the alignment loss.

    ``state`` is not modified; the advanced state is returned on the result so
    that loss evaluations (finite differences, for one) can be repeated.
    """
    fs, ft = np.asarray(fs, dtype=np.float64), np.asarray(ft, dtype=np.float64)
    ys, yt = np.asarray(ys, dtype=np.int64), np.asarray(yt, dtype=np.int64)
    D = fs.shape[1]
    new_s, rho_s, ctx_s = _advance_side(state.source, fs, ys, state.shared_rho)
    new_t, rho_t, ctx_t = _advance_side(state.target, ft, yt, state.shared_rho)
    new_state = replace(state, source=new_s, target=new_t, iteration=state.iteration + 1)
    active = new_state.active_classes if state.active else np.zeros(state.class_count, bool)
    loss = apa_loss(new_s.glob, new_t.glob, active)
    diff = np.zeros_like(new_s.glob)
    diff[active] = 2.0 * (new_s.glob[active] - new_t.glob[active])
    gs = _backward_side(diff, ys, ctx_s, len(fs), D)
    gt = _backward_side(-diff, yt, ctx_t, len(ft), D)
    return ApaResult(loss, gs, gt, new_state, rho_s, rho_t)


def local_alignment(fs, ys, ft, yt, C: int) -> ApaResult:
    """Mini-batch-only variant: align this batch's local prototypes directly."""
    fs, ft = np.asarray(fs, dtype=np.float64), np.asarray(ft, dtype=np.float64)
    ss, ns = class_sums(fs, np.asarray(ys, dtype=np.int64), C)
    st, nt = class_sums(ft, np.asarray(yt, dtype=np.int64), C)
    both = (ns > 0) & (nt > 0)
    diff = np.zeros_like(ss)
    diff[both] = ss[both] / ns[both, None] - st[both] / nt[both, None]
    loss = float(np.sum(diff * diff))
    gs = np.zeros_like(fs)
    gt = np.zeros_like(ft)
    if len(fs):
        gs = (2.0 * diff / np.maximum(ns, 1)[:, None])[ys]
    if len(ft):
        gt = (-2.0 * diff / np.maximum(nt, 1)[:, None])[yt]
    nan = np.full(C, np.nan)
    return ApaResult(loss, gs, gt, None, nan, nan.copy())

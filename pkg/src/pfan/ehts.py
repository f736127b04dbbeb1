"""Easy-to-hard selection of pseudo-labeled target samples.

Source prototypes are per-class mean embeddings. Each target embedding is
scored by cosine similarity against every prototype, labeled with the best
class, and kept only if that best score clears a threshold that rises with
the adaptation step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


@dataclass
class PrototypeSet:
    centroids: np.ndarray  # C x D; rows of invalid classes are NaN
    counts: np.ndarray
    provenance: str = "source"

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    @property
    def class_count(self) -> int:
        return self.centroids.shape[0]


@dataclass
class PseudoLabeledSet:
    indices: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    step: int
    threshold: float
    candidate_labels: np.ndarray | None = None  # pseudo-labels of every target sample

    def __len__(self) -> int:
        return self.indices.size

    def class_counts(self, C: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=C)


def class_sums(features: np.ndarray, labels: np.ndarray, C: int) -> tuple[np.ndarray, np.ndarray]:
    # np.add.at accumulates rows in index order: fixed summation order
    sums = np.zeros((C, features.shape[1]))
    np.add.at(sums, labels, features)
    return sums, np.bincount(labels, minlength=C)


def compute_prototypes(features, labels, C: int, provenance: str = "source") -> PrototypeSet:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    sums, counts = class_sums(features, labels, C)
    cents = np.full_like(sums, np.nan)
    ok = counts > 0
    cents[ok] = sums[ok] / counts[ok, None]
    return PrototypeSet(cents, counts, provenance)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / ((np.linalg.norm(a) + NORM_EPS) * (np.linalg.norm(b) + NORM_EPS)))


def similarity_scores(features, prototypes: PrototypeSet) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    valid = prototypes.valid
    c = np.where(valid[:, None], prototypes.centroids, 0.0)
    fn = np.linalg.norm(f, axis=1) + NORM_EPS
    cn = np.linalg.norm(c, axis=1) + NORM_EPS
    s = (f @ c.T) / fn[:, None] / cn[None, :]
    s = np.clip(s, -1.0, 1.0)
    s[:, ~valid] = -np.inf
    return s


def assign_pseudo_labels(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax per row; np.argmax returns the first maximum, so ties go to the lowest class."""
    scores = np.asarray(scores)
    if scores.shape[1] == 0 or (len(scores) and np.isneginf(scores).all()):
        raise ValueError("no valid class to assign")
    labels = np.argmax(scores, axis=1)
    return labels, scores[np.arange(len(labels)), labels]


def threshold(m: int, mu: float = 0.8) -> float:
    if m < 0:
        raise ValueError("step index must be non-negative")
    if not mu > 0:
        raise ValueError("mu must be positive")
    return 1.0 / (1.0 + math.exp(-mu * (m + 1))) - 0.01


def select_easy(labels, scores, tau: float, step: int = 0) -> PseudoLabeledSet:
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.flatnonzero(scores >= tau)
    return PseudoLabeledSet(keep, labels[keep], scores[keep], step, tau)


def run_ehts(source_features, source_labels, target_features, C: int, m: int,
             mu: float = 0.8) -> tuple[PseudoLabeledSet, np.ndarray, np.ndarray]:
    """One full selection pass.

    Returns the selection plus the pseudo-labels and best scores of every
    target sample (the latter feed the random / full-target ablations).
    """
    protos = compute_prototypes(source_features, source_labels, C)
    labels, best = assign_pseudo_labels(similarity_scores(target_features, protos))
    sel = select_easy(labels, best, threshold(m, mu), m)
    sel.candidate_labels = labels
    return sel, labels, best

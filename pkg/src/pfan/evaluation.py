"""Diagnostics: accuracy, pseudo-label precision, proxy A-distance, PCA export,
and the ablation table.

This is the only module that reads target ground truth (:func:`oracle_labels`).
Training receives those numbers through a :class:`Monitor`, which evaluates a
model and hands back scalars; the labels themselves never leave this module.
"""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datasets import DomainDataset
from .ehts import PseudoLabeledSet
from .model import PFANModel


def oracle_labels(ds: DomainDataset) -> np.ndarray:
    """Ground-truth labels of either domain, including the hidden target ones."""
    lab = ds.labels if ds.labels is not None else ds._truth
    if lab is None:
        raise ValueError(f"{ds.domain} dataset carries no ground truth")
    return lab


def accuracy(model: PFANModel, ds: DomainDataset) -> float:
    y = oracle_labels(ds)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(ds.features) == y))


def pseudo_label_accuracy(selection: PseudoLabeledSet, truth: np.ndarray) -> float | None:
    """Fraction of selected samples whose pseudo-label is right; None when nothing was selected."""
    if len(selection) == 0:
        return None
    return float(np.mean(selection.labels == np.asarray(truth)[selection.indices]))


def random_selection_precision(selection: PseudoLabeledSet, truth: np.ndarray) -> float | None:
    """Expected precision of a uniformly random subset of the same size.

    For sampling without replacement this expectation is the pseudo-label
    accuracy over the whole target set, whatever the subset size.
    """
    if len(selection) == 0 or selection.candidate_labels is None:
        return None
    return float(np.mean(selection.candidate_labels == np.asarray(truth)))


class Monitor:
    """Per-round metrics for the trainer, computed against held-out truth."""

    def __init__(self, source: DomainDataset, target: DomainDataset):
        self._source = source
        self._target = target
        self._truth = oracle_labels(target)

    def __call__(self, model: PFANModel, selection: PseudoLabeledSet | None) -> dict:
        out = {"source_acc": accuracy(model, self._source),
               "target_acc": accuracy(model, self._target)}
        if selection is not None:
            out["pseudo_acc"] = pseudo_label_accuracy(selection, self._truth)
            out["random_precision"] = random_selection_precision(selection, self._truth)
        return out


# --- proxy A-distance ---------------------------------------------------

def _train_probe(x, y, seed, hidden=16, epochs=60, lr=0.05, batch=32):
    rng = nx.make_rng(seed, "probe")
    l1 = nx.LayerParams.glorot(x.shape[1], hidden, rng)
    l2 = nx.LayerParams.glorot(hidden, 1, rng)
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for s in range(0, len(x), batch):
            b = perm[s:s + batch]
            l1.zero_grad()
            l2.zero_grad()
            a1 = nx.affine_forward(x[b], l1)
            h = nx.relu_forward(a1)
            logit = nx.affine_forward(h, l2)[:, 0]
            yb = y[b]
            g = (nx.sigmoid(logit) - yb) / len(b)
            gh = nx.affine_backward(h, l2, g[:, None])
            nx.affine_backward(x[b], l1, nx.relu_backward(a1, gh))
            nx.sgd_momentum_step(l1, lr)
            nx.sgd_momentum_step(l2, lr)

    def predict(z):
        return nx.affine_forward(nx.relu_forward(nx.affine_forward(z, l1)), l2)[:, 0] > 0
    return predict


def proxy_a_distance(source_features, target_features, seed: int = 0,
                     conventional: bool = False, **probe_kw) -> float:
    """2(1 - eps) with eps the held-out error of a small source-vs-target probe.

    ``conventional=True`` returns 2(1 - 2 eps) instead.
    """
    fs = np.asarray(source_features, dtype=np.float64)
    ft = np.asarray(target_features, dtype=np.float64)
    if len(fs) < 2 or len(ft) < 2:
        raise ValueError("need at least two samples per domain")
    x = np.vstack([fs, ft])
    y = np.concatenate([np.ones(len(fs)), np.zeros(len(ft))])
    perm = nx.make_rng(seed, "probe-split").permutation(len(x))
    cut = int(0.8 * len(x))
    tr, te = perm[:cut], perm[cut:]
    if len(te) == 0 or len(np.unique(y[tr])) < 2:
        raise ValueError("degenerate train/test split")
    # scale with training-split statistics so the probe's step size is meaningful
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    xs = (x - mu) / sd
    predict = _train_probe(xs[tr], y[tr], seed, **probe_kw)
    eps = float(np.mean(predict(xs[te]) != (y[te] > 0.5)))
    return 2.0 * (1.0 - 2.0 * eps) if conventional else 2.0 * (1.0 - eps)


def proxy_a_distance_median(source_features, target_features, seeds=(0, 1, 2), **kw) -> float:
    return float(statistics.median(proxy_a_distance(source_features, target_features, s, **kw)
                                   for s in seeds))


# --- embedding export ---------------------------------------------------

def pca_2d(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vecs = vecs[:, order]
    out = np.zeros((len(x), 2))
    k = min(2, vecs.shape[1])
    out[:, :k] = xc @ vecs[:, :k]
    return out


def export_embedding_2d(features, labels, domain_tags, path) -> np.ndarray:
    xy = pca_2d(features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "class", "domain"])
        for (a, b), k, d in zip(xy, labels, domain_tags):
            w.writerow([repr(float(a)), repr(float(b)), int(k), d])
    return xy


# --- ablation table -----------------------------------------------------

@dataclass
class AblationTable:
    variants: list[str]
    seeds: list[int]
    acc: dict  # (variant, seed) -> final target accuracy

    def median(self, variant: str) -> float:
        return float(statistics.median(self.acc[(variant, s)] for s in self.seeds))

    def rows(self) -> list[dict]:
        out = []
        for v in self.variants:
            row = {"variant": v}
            for s in self.seeds:
                row[f"seed_{s}"] = self.acc[(v, s)]
            row["median"] = self.median(v)
            out.append(row)
        return out

    def columns(self) -> list[str]:
        return ["variant"] + [f"seed_{s}" for s in self.seeds] + ["median"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns(), lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def ablation_table(reports) -> AblationTable:
    """Final target accuracy per (variant, seed); every variant must cover the same seeds."""
    grid: dict[str, set] = {}
    acc = {}
    for r in reports:
        if r.final_target_acc is None:
            raise ValueError(f"report {r.variant}/{r.seed} has no target accuracy")
        grid.setdefault(r.variant, set()).add(r.seed)
        acc[(r.variant, r.seed)] = r.final_target_acc
    seed_sets = {frozenset(s) for s in grid.values()}
    if len(seed_sets) != 1:
        raise ValueError(f"mismatched seed grids: { {v: sorted(s) for v, s in grid.items()} }")
    variants = list(dict.fromkeys(r.variant for r in reports))
    return AblationTable(variants, sorted(next(iter(seed_sets))), acc)


def write_rows(path, rows, columns) -> None:
    from .trainer import rows_to_csv
    Path(path).write_text(rows_to_csv(rows, columns), encoding="utf-8")

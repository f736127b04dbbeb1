"""Two-stage training: source pretraining, then progressive adaptation.

Stage 1 fits G and F on labeled source data with the temperature softmax.
Stage 2 runs ``steps`` rounds. Each round re-selects easy target samples with
the round-start model, seeds the global prototypes, then runs
``iters_per_step`` mini-batch updates of

    L = CE_T(F(G(x_s)), y_s) + lambda * L_domain + gamma * L_align

with a single backward pass. The domain term reaches G through gradient
reversal.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import apa as apa_mod
from . import ehts
from . import numerics as nx
from .datasets import DomainDataset
from .model import Architecture, PFANModel, grl_backward

log = logging.getLogger(__name__)

VARIANTS = ("PFAN", "Random", "FullTarget", "woAPA", "woA", "woT", "SourceOnly")

REPORT_COLUMNS = ("step", "iter", "p", "lr", "lambda", "gamma", "L_c", "L_d", "L_apa",
                  "tau", "n_selected", "source_acc", "target_acc", "pseudo_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    delta: float = 10.0
    T: float = 1.8
    mu: float = 0.8
    batch: int = 128
    steps: int = 6
    iters_per_step: int = 200
    pretrain_epochs: int = 40
    seed: int = 0
    variant: str = "PFAN"
    domain_loss_target: str = "selected"
    lambda_weight: float = 1.0
    gamma_weight: float = 1.0
    shared_rho: bool = False
    reset_momentum: bool = False
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 16
    disc_hidden: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.domain_loss_target not in ("selected", "full"):
            raise ValueError("domain_loss_target must be 'selected' or 'full'")
        for name in ("lr0", "T", "mu", "batch", "iters_per_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "beta", "delta", "steps", "pretrain_epochs",
                     "lambda_weight", "gamma_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class Settings:
    """What a variant actually switches. Variants differ only through these."""
    T: float
    gamma_weight: float
    selection: str  # ehts | random | full
    alignment: str  # global | local
    steps: int


def resolve(cfg: TrainConfig) -> Settings:
    s = Settings(cfg.T, cfg.gamma_weight, "ehts", "global", cfg.steps)
    v = cfg.variant
    if v == "Random":
        s = replace(s, selection="random")
    elif v == "FullTarget":
        s = replace(s, selection="full")
    elif v == "woAPA":
        s = replace(s, gamma_weight=0.0)
    elif v == "woA":
        s = replace(s, alignment="local")
    elif v == "woT":
        s = replace(s, T=1.0)
    elif v == "SourceOnly":
        s = replace(s, steps=0)
    return s


def lr_schedule(p: float, cfg: TrainConfig) -> float:
    return cfg.lr0 / (1.0 + cfg.alpha * p) ** cfg.beta


def lambda_gamma_schedule(p: float, cfg: TrainConfig) -> tuple[float, float]:
    ramp = 2.0 / (1.0 + math.exp(-cfg.delta * p)) - 1.0
    return cfg.lambda_weight * ramp, cfg.gamma_weight * ramp


def progress(t: int, total: int) -> float:
    """p for the t-th (0-based) of ``total`` stage-2 iterations: 0 first, 1 last."""
    return t / (total - 1) if total > 1 else 0.0


# --- loss ---------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    L_c: float
    L_d: float
    L_apa: float
    objective_g: float  # what G and F descend: L_c - lambda*L_d + gamma*L_apa
    apa: apa_mod.ApaResult | None = None


def total_loss(model: PFANModel, xs, ys, xt, yt, state: apa_mod.GlobalPrototypeState | None,
               T: float, lam: float, gamma: float, alignment: str = "global",
               xt_domain=None, reverse: bool = True,
               terms: tuple[str, ...] = ("c", "d", "apa")) -> LossResult:
    """Forward and backward for one batch; fills the model's gradient buffers.

    ``state`` is read, never modified; the advanced prototype state is on
    ``result.apa.state``. ``xt_domain`` replaces ``xt`` as the discriminator's
    target batch. With ``reverse=False`` G receives the plain (unreversed)
    domain gradient scaled by lambda.
    """
    model.zero_grad()
    xs, xt = nx.as_matrix(xs), nx.as_matrix(xt)
    ys, yt = np.asarray(ys, dtype=np.int64), np.asarray(yt, dtype=np.int64)
    ns, nt = len(xs), len(xt)
    x_dom = None if xt_domain is None else nx.as_matrix(xt_domain)
    x_all = np.vstack([xs, xt] + ([x_dom] if x_dom is not None else []))
    f_all, cache = model.G.forward(x_all)
    fs, ft = f_all[:ns], f_all[ns:ns + nt]
    g_all = np.zeros_like(f_all)

    L_c = L_d = L_apa = 0.0
    if "c" in terms:
        z = model.F.logits(fs)
        L_c, gz = nx.softmax_cross_entropy(z, ys, T)
        g_all[:ns] += model.F.backward(fs, gz)

    if "d" in terms:
        f_dom = f_all if x_dom is None else np.vstack([fs, f_all[ns + nt:]])
        logit, dcache = model.D.forward(f_dom)
        ls, gs = nx.binary_cross_entropy_logits(logit[:ns], 1.0)
        lt, gt = nx.binary_cross_entropy_logits(logit[ns:], 0.0)
        L_d = ls + lt
        g_dom = model.D.backward(dcache, np.vstack([gs, gt]))
        g_dom = grl_backward(g_dom, lam) if reverse else lam * g_dom
        if x_dom is None:
            g_all += g_dom
        else:
            g_all[:ns] += g_dom[:ns]
            g_all[ns + nt:] += g_dom[ns:]

    res = None
    if "apa" in terms and state is not None and nt:
        if alignment == "local":
            res = apa_mod.local_alignment(fs, ys, ft, yt, model.class_count)
        else:
            res = apa_mod.apa_step(state, fs, ys, ft, yt)
        L_apa = res.loss
        if gamma != 0.0:
            g_all[:ns] += gamma * res.grad_source
            g_all[ns:ns + nt] += gamma * res.grad_target

    model.G.backward(cache, g_all)
    total = L_c + lam * L_d + gamma * L_apa
    if not math.isfinite(total):
        raise nx.DivergenceError(f"non-finite loss: L_c={L_c} L_d={L_d} L_apa={L_apa}")
    return LossResult(total, L_c, L_d, L_apa, L_c - lam * L_d + gamma * L_apa, res)


def sgd_update(model: PFANModel, lr: float) -> None:
    for p in model.layers():
        nx.sgd_momentum_step(p, lr)


# --- stage 1 ------------------------------------------------------------

def pretrain_source(cfg: TrainConfig, source: DomainDataset, T: float | None = None,
                    model: PFANModel | None = None) -> tuple[PFANModel, list[float]]:
    """Fit G and F on source labels only. Returns model_0 and per-epoch mean CE."""
    if source.labels is None:
        raise ValueError("source data must be labeled")
    T = resolve(cfg).T if T is None else T
    if model is None:
        arch = Architecture(source.dim, source.class_count, cfg.hidden, cfg.feature_dim, cfg.disc_hidden)
        model = PFANModel.init(arch, cfg.seed, T)
    model.F.temperature = T
    rng = nx.make_rng(cfg.seed, "pretrain")
    curve = []
    for _ in range(cfg.pretrain_epochs):
        losses = []
        for idx in _epoch(len(source), cfg.batch, rng):
            model.zero_grad()
            f, cache = model.G.forward(source.features[idx])
            loss, gz = nx.softmax_cross_entropy(model.F.logits(f), source.labels[idx], T)
            if not math.isfinite(loss):
                raise nx.DivergenceError("non-finite loss during pretraining")
            model.G.backward(cache, model.F.backward(f, gz))
            for p in model.G.layers + [model.F.layer]:
                nx.sgd_momentum_step(p, cfg.lr0)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    model.step = 0
    return model, curve


def _epoch(n, batch, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch):
        yield perm[s:s + batch]


class _Sampler:
    """Endless mini-batches of indices into ``n`` rows.

    Draws whole shuffled epochs when the pool can cover the step's demand,
    otherwise samples with replacement.
    """

    def __init__(self, n, size, demand, rng):
        self.n, self.size, self.rng = n, size, rng
        self.replace = n < demand
        self._buf = np.empty(0, dtype=np.int64)

    def draw(self):
        if self.replace:
            return self.rng.integers(0, self.n, self.size)
        while len(self._buf) < self.size:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[:self.size], self._buf[self.size:]
        return out


# --- stage 2 ------------------------------------------------------------

@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    selections: list[dict] = field(default_factory=list)
    prototype_trace: list[dict] = field(default_factory=list)
    pretrain_curve: list[float] = field(default_factory=list)
    stage1: dict = field(default_factory=dict)
    model: PFANModel | None = None
    initial_model: PFANModel | None = None  # model_0, kept for diagnostics
    variant: str = "PFAN"
    seed: int = 0

    @property
    def final_target_acc(self) -> float | None:
        if self.rows:
            return self.rows[-1].get("target_acc")
        return self.stage1.get("target_acc")

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, REPORT_COLUMNS)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


Monitor = Callable[[PFANModel, "ehts.PseudoLabeledSet | None"], dict]


def select_targets(model: PFANModel, source: DomainDataset, target: DomainDataset,
                   m: int, cfg: TrainConfig, settings: Settings):
    """Selection for the round starting at threshold index ``m``."""
    fs = model.forward_features(source.features)
    ft = model.forward_features(target.features)
    sel, labels, best = ehts.run_ehts(fs, source.labels, ft, model.class_count, m, cfg.mu)
    if settings.selection == "random":
        rng = nx.make_rng(cfg.seed, "random-select", m)
        idx = np.sort(rng.choice(len(target), size=len(sel), replace=False))
        sel = ehts.PseudoLabeledSet(idx, labels[idx], best[idx], m, sel.threshold, labels)
    elif settings.selection == "full":
        idx = np.arange(len(target))
        sel = ehts.PseudoLabeledSet(idx, labels, best, m, sel.threshold, labels)
    return sel, fs, ft


def adaptation_step(model: PFANModel, m: int, source: DomainDataset, target: DomainDataset,
                    cfg: TrainConfig, report: RunReport | None = None,
                    monitor: Monitor | None = None) -> PFANModel:
    """Round ``m`` (1-based) of stage 2; updates ``model`` in place into model_m."""
    if m < 1:
        raise ValueError("adaptation rounds start at m = 1")
    if target.labels is not None:
        raise ValueError("target data must be unlabeled for training")
    settings = resolve(cfg)
    sched = replace(cfg, gamma_weight=settings.gamma_weight)
    report = report if report is not None else RunReport()
    C = model.class_count
    model.F.temperature = settings.T
    if cfg.reset_momentum:
        model.reset_momentum()

    sel, fs_all, ft_all = select_targets(model, source, target, m - 1, cfg, settings)
    audit = {"m": m, "tau": sel.threshold, "n_selected": len(sel)}
    for k, c in enumerate(sel.class_counts(C)):
        audit[f"count_{k}"] = int(c)
    report.selections.append(audit)

    state = apa_mod.init_global(fs_all, source.labels, ft_all[sel.indices], sel.labels, C,
                                shared_rho=cfg.shared_rho)
    empty = len(sel) == 0
    if empty:
        log.warning("round %d: no target sample cleared tau=%.6f; source loss only", m, sel.threshold)

    rng = nx.make_rng(cfg.seed, "batches", m)
    half_s = cfg.batch - cfg.batch // 2
    half_t = cfg.batch // 2
    iters = cfg.iters_per_step
    src_draw = _Sampler(len(source), half_s, iters * half_s, rng)
    tgt_draw = None if empty else _Sampler(len(sel), half_t, iters * half_t, rng)
    full_draw = _Sampler(len(target), half_t, iters * half_t, rng) \
        if cfg.domain_loss_target == "full" else None
    total_iters = settings.steps * iters
    sums = {"L_c": 0.0, "L_d": 0.0, "L_apa": 0.0}

    for I in range(1, iters + 1):
        t = (m - 1) * iters + (I - 1)
        p = progress(t, total_iters)
        lr = lr_schedule(p, cfg)
        lam, gam = lambda_gamma_schedule(p, sched)
        bs = src_draw.draw()
        xs, ys = source.features[bs], source.labels[bs]
        if empty:
            res = total_loss(model, xs, ys, np.zeros((0, source.dim)), [], None,
                             settings.T, 0.0, 0.0, terms=("c",))
        else:
            pick = tgt_draw.draw()
            bt = sel.indices[pick]
            x_dom = target.features[full_draw.draw()] if full_draw is not None else None
            res = total_loss(model, xs, ys, target.features[bt], sel.labels[pick], state,
                             settings.T, lam, gam, settings.alignment, xt_domain=x_dom)
            if res.apa is not None and res.apa.state is not None:
                state = res.apa.state
                for k in range(C):
                    if not (np.isnan(res.apa.rho_source[k]) and np.isnan(res.apa.rho_target[k])):
                        gap = state.source.glob[k] - state.target.glob[k]
                        report.prototype_trace.append({
                            "m": m, "I": I, "k": k,
                            "rho_s": res.apa.rho_source[k], "rho_t": res.apa.rho_target[k],
                            "dist": float(np.linalg.norm(gap)) if state.active_classes[k] else None,
                        })
        sgd_update(model, lr)
        for key in sums:
            sums[key] += getattr(res, key)
        report.iterations.append({"step": m, "iter": I, "p": p, "lr": lr, "lambda": lam,
                                  "gamma": gam, "L_c": res.L_c, "L_d": res.L_d,
                                  "L_apa": res.L_apa, "loss": res.total})

    model.step = m
    last = report.iterations[-1]
    row = {"step": m, "iter": iters, "p": last["p"], "lr": last["lr"], "lambda": last["lambda"],
           "gamma": last["gamma"], "tau": sel.threshold, "n_selected": len(sel)}
    row.update({k: v / iters for k, v in sums.items()})
    if monitor is not None:
        metrics = monitor(model, sel)
        if "random_precision" in metrics:
            audit["random_precision"] = metrics.pop("random_precision")
        if "pseudo_acc" in metrics:
            audit["precision"] = metrics["pseudo_acc"]
        row.update(metrics)
    report.rows.append(row)
    return model


def run(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
        monitor: Monitor | None = None, model: PFANModel | None = None,
        start_step: int = 1) -> RunReport:
    """Stage 1 (skipped when ``model`` is given) then the remaining stage-2 rounds."""
    settings = resolve(cfg)
    report = RunReport(variant=cfg.variant, seed=cfg.seed)
    if model is None:
        model, report.pretrain_curve = pretrain_source(cfg, source, settings.T)
        if monitor is not None:
            report.stage1 = monitor(model, None)
    report.initial_model = model.copy()
    for m in range(start_step, settings.steps + 1):
        adaptation_step(model, m, source, target, cfg, report, monitor)
    report.model = model
    return report

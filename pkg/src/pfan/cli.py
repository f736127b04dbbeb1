"""Command line entry point: ``pfan {gen-data,pretrain,adapt,ablate,eval} MANIFEST``.

A run is described by one JSON manifest::

    {
      "output_dir": "runs/rot30",
      "seed": 0,
      "dataset": {"kind": "gaussian", "rotation_deg": 30, "translation": [1.0, 0.0],
                  "per_class": 500},
      "train": {"domain_loss_target": "full"},
      "ablation": {"variants": ["PFAN", "SourceOnly"], "seeds": [0, 1, 2], "workers": 1},
      "metrics": {"target_acc": true, "a_distance": true, "embedding": true,
                  "figures": true, "temperature_comparison": true}
    }

``dataset.kind`` is ``gaussian``, ``moons`` or ``idx``; the last takes
``source_images``, ``source_labels``, ``target_images``, ``target_labels`` and
optional ``source_n``, ``target_n``, ``side``. ``--set a.b=value`` overrides a
key (value parsed as JSON when possible). A relative ``output_dir`` is placed
under ``$PFAN_OUTPUT_ROOT`` when that is set.

Exit codes: 2 configuration, 3 data, 4 divergence.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import evaluation as ev
from . import numerics as nx
from . import trainer as tr
from .model import SnapshotError, load_snapshot, save_snapshot

log = logging.getLogger("pfan")

OUTPUT_ROOT_ENV = "PFAN_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

DEFAULT_METRICS = {"target_acc": True, "a_distance": True, "embedding": True,
                   "figures": True, "temperature_comparison": True}
MANIFEST_KEYS = {"output_dir", "seed", "dataset", "train", "ablation", "metrics"}
SYNTHETIC_KEYS = {f.name for f in fields(ds.SyntheticShiftSpec)} - {"seed"}
IDX_KEYS = {"source_images", "source_labels", "target_images", "target_labels",
            "source_n", "target_n", "side"}


class ConfigError(ValueError):
    pass


# --- manifest -----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(manifest: dict, assignments) -> dict:
    out = copy.deepcopy(manifest)
    for item in assignments or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value)
    return out


def validate_manifest(manifest: dict) -> dict:
    """Fill defaults and check every section; returns the effective manifest."""
    if not isinstance(manifest, dict):
        raise ConfigError("manifest must be a JSON object")
    extra = set(manifest) - MANIFEST_KEYS
    if extra:
        raise ConfigError(f"unknown manifest keys: {sorted(extra)}")
    m = copy.deepcopy(manifest)
    if "output_dir" not in m:
        raise ConfigError("manifest needs output_dir")
    m.setdefault("seed", 0)
    if not isinstance(m["seed"], int) or m["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    m.setdefault("dataset", {"kind": "gaussian"})
    m.setdefault("train", {})
    m["metrics"] = {**DEFAULT_METRICS, **m.get("metrics", {})}
    unknown = set(m["metrics"]) - set(DEFAULT_METRICS)
    if unknown:
        raise ConfigError(f"unknown metric toggles: {sorted(unknown)}")
    abl = m.setdefault("ablation", {})
    abl.setdefault("variants", list(tr.VARIANTS))
    abl.setdefault("seeds", [m["seed"]])
    abl.setdefault("workers", 1)
    bad = [v for v in abl["variants"] if v not in tr.VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    if not abl["seeds"] or not all(isinstance(s, int) and s >= 0 for s in abl["seeds"]):
        raise ConfigError("ablation.seeds must be a non-empty list of non-negative integers")
    train_config(m)
    _dataset_section(m["dataset"])
    return m


def _dataset_section(d: dict) -> str:
    kind = d.get("kind", "gaussian")
    keys = set(d) - {"kind", "standardize", "rotation_deg"}
    if kind in ("gaussian", "moons"):
        extra = keys - SYNTHETIC_KEYS
        if "rotation" in d and "rotation_deg" in d:
            raise ConfigError("give rotation or rotation_deg, not both")
        if not extra:
            try:
                _synthetic_spec(d, 0).validate()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"dataset: {exc}") from exc
    elif kind == "idx":
        extra = keys - IDX_KEYS
        missing = {"source_images", "source_labels", "target_images", "target_labels"} - set(d)
        if missing:
            raise ConfigError(f"idx dataset needs {sorted(missing)}")
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if extra:
        raise ConfigError(f"unknown dataset keys: {sorted(extra)}")
    return kind


def train_config(m: dict, seed: int | None = None, variant: str | None = None) -> tr.TrainConfig:
    d = dict(m["train"])
    if "seed" in d:
        raise ConfigError("set the seed at manifest top level, not under train")
    d["seed"] = m["seed"] if seed is None else seed
    if variant is not None:
        d["variant"] = variant
    try:
        return tr.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def _synthetic_spec(d: dict, seed: int) -> ds.SyntheticShiftSpec:
    kw = {k: v for k, v in d.items() if k in SYNTHETIC_KEYS}
    if "rotation_deg" in d:
        kw["rotation"] = math.radians(d["rotation_deg"])
    if "translation" in kw:
        kw["translation"] = tuple(kw["translation"])
    return ds.SyntheticShiftSpec(seed=seed, **kw)


def build_datasets(d: dict, seed: int) -> tuple[ds.DomainDataset, ds.DomainDataset]:
    """Source and label-stripped target for the manifest's dataset section."""
    kind = _dataset_section(d)
    if kind == "idx":
        side = d.get("side", 16)
        source = ds.load_digits(d["source_images"], d["source_labels"], "source", side)
        target = ds.load_digits(d["target_images"], d["target_labels"], "target", side)
        if "source_n" in d:
            source = ds.subsample(source, d["source_n"], seed)
        if "target_n" in d:
            target = ds.subsample(target, d["target_n"], seed + 1)
        return source, target
    spec = _synthetic_spec(d, seed)
    gen = ds.gen_gaussian_shift if kind == "gaussian" else ds.gen_two_moons_shift
    source, target = gen(spec)
    if d.get("standardize", True):
        source, target = ds.standardize(source, target)
    return source, target


def resolve_output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# --- output bookkeeping -------------------------------------------------

class Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.created_root = not root.exists()
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        if not p.exists():  # files from earlier commands are left alone on rollback
            self.written.append(p)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content, encoding="utf-8")
        return p

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self.created_root and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()


def _write_manifest(out: Outputs, manifest: dict) -> None:
    out.text("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv(out: Outputs, name: str, rows, columns) -> None:
    out.text(name, tr.rows_to_csv(rows, columns))


def _columns(rows, first=()) -> list[str]:
    cols = list(first)
    for r in rows:
        cols += [k for k in r if k not in cols]
    return cols


def _plots():
    from . import plotting  # matplotlib is only imported when figures are requested
    return plotting


# --- commands -----------------------------------------------------------

def cmd_gen_data(m: dict, out: Outputs, args) -> None:
    source, target = build_datasets(m["dataset"], m["seed"])
    truth = ev.oracle_labels(target)
    path = out.path("data.npz")
    with open(path, "wb") as fh:
        np.savez(fh, source_features=source.features, source_labels=source.labels,
                 target_features=target.features, target_truth=truth)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    prov = {"dataset": m["dataset"], "seed": m["seed"], "sha256": digest,
            "source_rows": len(source), "target_rows": len(target), "dim": source.dim,
            "class_count": source.class_count,
            "source_class_counts": source.class_counts().tolist()}
    out.text("provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")


def _monitor(m, source, target):
    return ev.Monitor(source, target) if m["metrics"]["target_acc"] else None


def cmd_pretrain(m: dict, out: Outputs, args) -> None:
    cfg = train_config(m)
    source, target = build_datasets(m["dataset"], cfg.seed)
    T = tr.resolve(cfg).T
    model, curve = tr.pretrain_source(cfg, source, T)
    save_snapshot(model, out.path("model_0.snap"))
    curves = {f"T={T:g}": curve}
    if m["metrics"]["temperature_comparison"] and T != 1.0:
        curves["T=1"] = tr.pretrain_source(cfg, source, 1.0)[1]
    names = list(curves)
    rows = [{"epoch": e, **{n: curves[n][e] for n in names}} for e in range(len(curve))]
    _csv(out, "pretrain_curve.csv", rows, ["epoch"] + names)
    mon = _monitor(m, source, target)
    stage1 = mon(model, None) if mon else {"source_acc": ev.accuracy(model, source)}
    _csv(out, "stage1.csv", [stage1], list(stage1))
    if m["metrics"]["figures"]:
        _plots().pretrain_curves(curves, out.path("pretrain_curve.png"))


def cmd_adapt(m: dict, out: Outputs, args) -> None:
    cfg = train_config(m)
    source, target = build_datasets(m["dataset"], cfg.seed)
    mon = _monitor(m, source, target)
    snap = Path(args.snapshot) if args.snapshot else out.root / "model_0.snap"
    if snap.exists():
        model = load_snapshot(snap)
        if model.G.input_dim != source.dim or model.class_count != source.class_count:
            raise SnapshotError(f"{snap} does not fit the manifest's dataset")
        report = tr.run(cfg, source, target, mon, model=model, start_step=model.step + 1)
        report.stage1 = mon(report.initial_model, None) if mon else {}
    elif args.snapshot:
        raise FileNotFoundError(f"snapshot {snap} not found")
    else:
        report = tr.run(cfg, source, target, mon)
        save_snapshot(report.initial_model, out.path("model_0.snap"))
    save_snapshot(report.model, out.path("model_final.snap"))
    out.text("run_report.csv", report.to_csv())
    _csv(out, "iterations.csv", report.iterations,
         ["step", "iter", "p", "lr", "lambda", "gamma", "L_c", "L_d", "L_apa", "loss"])
    _csv(out, "selections.csv", report.selections,
         _columns(report.selections, ("m", "tau", "n_selected")))
    _csv(out, "prototype_trace.csv", report.prototype_trace,
         ["m", "I", "k", "rho_s", "rho_t", "dist"])
    if report.stage1:
        _csv(out, "stage1.csv", [report.stage1], list(report.stage1))
    if m["metrics"]["figures"]:
        plots = _plots()
        plots.selection_curves(report.selections, out.path("selection.png"))
        if mon:
            plots.accuracy_curves(report.rows, report.stage1, out.path("accuracy.png"))


def _ablation_job(job):
    manifest, variant, seed = job
    cfg = train_config(manifest, seed=seed, variant=variant)
    source, target = build_datasets(manifest["dataset"], seed)
    report = tr.run(cfg, source, target, ev.Monitor(source, target))
    report.model = report.initial_model = None  # keep the pickle small
    return report


def cmd_ablate(m: dict, out: Outputs, args) -> None:
    abl = m["ablation"]
    jobs = [(m, v, s) for v in abl["variants"] for s in abl["seeds"]]
    workers = int(abl["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_ablation_job, jobs))
    else:
        reports = [_ablation_job(j) for j in jobs]
    table = ev.ablation_table(reports)
    table.write_csv(out.path("ablation.csv"))
    if m["metrics"]["figures"]:
        _plots().ablation_bars(table, out.path("ablation.png"))


def cmd_eval(m: dict, out: Outputs, args) -> None:
    source, target = build_datasets(m["dataset"], m["seed"])
    snap = Path(args.snapshot) if args.snapshot else out.root / "model_final.snap"
    model = load_snapshot(snap)
    if model.G.input_dim != source.dim or model.class_count != source.class_count:
        raise SnapshotError(f"{snap} does not fit the manifest's dataset")
    cfg = train_config(m)
    before = model.fingerprint()
    truth = ev.oracle_labels(target)
    sel, _, _ = tr.select_targets(model, source, target, model.step, cfg, tr.resolve(cfg))
    metrics = {"step": model.step,
               "source_acc": ev.accuracy(model, source),
               "target_acc": ev.accuracy(model, target),
               "n_selected": len(sel),
               "pseudo_acc": ev.pseudo_label_accuracy(sel, truth)}
    fs, ft = model.forward_features(source.features), model.forward_features(target.features)
    bars = {}
    if m["metrics"]["a_distance"]:
        metrics["a_distance"] = bars[snap.stem] = ev.proxy_a_distance_median(fs, ft)
        base = Path(args.baseline) if args.baseline else None
        if base is not None:
            bm = load_snapshot(base, like=model)
            metrics["a_distance_baseline"] = bars[base.stem] = ev.proxy_a_distance_median(
                bm.forward_features(source.features), bm.forward_features(target.features))
    _csv(out, "eval.csv", [{"metric": k, "value": v} for k, v in metrics.items()],
         ["metric", "value"])
    xy = None
    if m["metrics"]["embedding"]:
        labels = np.concatenate([source.labels, truth])
        tags = ["source"] * len(source) + ["target"] * len(target)
        xy = ev.export_embedding_2d(np.vstack([fs, ft]), labels, tags, out.path("embedding.csv"))
    if m["metrics"]["figures"]:
        plots = _plots()
        if xy is not None:
            plots.embedding_scatter(xy, labels, tags, out.path("embedding.png"))
        if bars:
            plots.a_distance_bars(bars, out.path("a_distance.png"))
    if model.fingerprint() != before:
        raise RuntimeError("evaluation mutated the model")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "ablate": cmd_ablate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfan", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("manifest", help="JSON manifest")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a manifest key, e.g. train.steps=3")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        if name in ("adapt", "eval"):
            p.add_argument("--snapshot", help="model snapshot to start from / evaluate")
        if name == "eval":
            p.add_argument("--baseline", help="second snapshot for the A-distance comparison")
    return parser


def load_manifest(path, overrides=(), seed=None, output_dir=None) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return validate_manifest(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = load_manifest(args.manifest, args.set, args.seed, args.output_dir)
    except ConfigError as exc:
        print(f"pfan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs(resolve_output_dir(manifest["output_dir"]))
    try:
        _write_manifest(out, manifest)
        COMMANDS[args.command](manifest, out, args)
        return 0
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (ds.DatasetError, SnapshotError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (nx.DivergenceError, FloatingPointError) as exc:
        code, msg = EXIT_DIVERGED, f"training diverged: {exc}"
    except BaseException:
        out.rollback()
        raise
    out.rollback()
    print(f"pfan: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

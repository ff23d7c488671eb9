"""Ablation matrix, replacement-fraction sweep and their machine-readable outputs.

A *cell* is one (hsm, ds, bna) combination trained for one seed. Batch-norm
adaptation happens after training, so a single training run yields both the
``bna=off`` and ``bna=on`` cell. Within a seed every cell shares the
classifier initialisation, the real train/test split and the world, so
differences between cells come from the methods alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from itertools import product
from pathlib import Path

import numpy as np

from .bna import adapt_bn_statistics, bn_shift_report
from .config import ExperimentConfig, dumps_config
from .nn import Classifier
from .pipeline import SmoothingConfig, collect_hsm_dataset, train_with_ds
from .seeding import stream
from .trainer import Trainer, evaluate, train_fixed
from .world import World, build_world, make_real_splits

log = logging.getLogger(__name__)

RECORD_FORMAT = "gentrain-run"
RECORD_VERSION = 1


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def cell_name(hsm: bool, ds: bool, bna: bool) -> str:
    parts = [name for name, on in (("hsm", hsm), ("ds", ds), ("bna", bna)) if on]
    return "baseline" if not parts else "+".join(parts)


@dataclass
class MetricsRecord:
    fingerprint: str
    seed: int
    cell: str
    toggles: dict
    replacement_fraction: float
    accuracy: float | None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    error: str | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        # wall-clock is kept out of the record so records are byte-reproducible
        return {
            "format": RECORD_FORMAT,
            "version": RECORD_VERSION,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "cell": self.cell,
            "toggles": self.toggles,
            "replacement_fraction": self.replacement_fraction,
            "accuracy": self.accuracy,
            "history": self.history,
            "extra": self.extra,
            "error": self.error,
        }


# ----------------------------------------------------------------- building blocks


def new_classifier(cfg: ExperimentConfig, world: World, seed: int, purpose: str = "init") -> Classifier:
    spec = cfg.classifier
    return Classifier.build(world.obs_dim, world.n_classes, hidden=spec.hidden,
                            rng=stream(seed, purpose), activation=spec.activation,
                            bn_alpha=spec.bn_alpha, bn_eps=spec.bn_eps)


def real_splits(cfg: ExperimentConfig, world: World, seed: int):
    return make_real_splits(world, cfg.data.real_train_per_class, cfg.data.real_test_per_class, seed)


def train_generated(cfg: ExperimentConfig, world: World, seed: int, hsm: bool, r: float,
                    test=None) -> tuple[Classifier, list[dict]]:
    """Train one classifier on generated data.

    ``r == 0`` is the fixed-dataset regime (with ``hsm`` the set is collected by
    alternating training and mining, then a fresh classifier is trained on it);
    ``r > 0`` smooths the set every epoch, mining half of the fresh part when
    ``hsm`` is on.
    """
    N = cfg.data.epoch_size

    def on_epoch(rec, clf):
        if test is not None:
            rec["eval_accuracy"] = evaluate(clf, test)

    clf = new_classifier(cfg, world, seed)
    initial = None
    if hsm and r == 0:
        aux = Trainer(new_classifier(cfg, world, seed, "aux-init"), cfg.train, stream(seed, "aux-shuffle"))
        initial, _ = collect_hsm_dataset(world, aux, N, cfg.data.collect_chunk, cfg.hsm, seed=seed)
    smoothing = SmoothingConfig(replacement_fraction=r, use_hsm=hsm and r > 0, epoch_size=N)
    return train_with_ds(clf, world, cfg.train, smoothing, cfg.hsm, seed=seed, initial=initial,
                         on_epoch=on_epoch)


def apply_bna(cfg: ExperimentConfig, clf: Classifier, real_train, seed: int) -> tuple[Classifier, dict]:
    adapted = clf.copy()
    summary = adapt_bn_statistics(adapted, real_train, passes=cfg.bna.passes,
                                  batch_size=cfg.bna.batch_size, alpha=cfg.bna.alpha,
                                  reset=cfg.bna.reset, rng=stream(seed, "bna"))
    return adapted, summary


def _moment_summary(summary: dict) -> list[dict]:
    out = []
    for before, after in zip(summary["before"], summary["after"]):
        out.append({
            "mean_before": float(np.mean(before["running_mean"])),
            "mean_after": float(np.mean(after["running_mean"])),
            "var_before": float(np.mean(before["running_var"])),
            "var_after": float(np.mean(after["running_var"])),
        })
    return out


def run_pair(cfg: ExperimentConfig, seed: int, hsm: bool, r: float, ds: bool) -> list[MetricsRecord]:
    """Train once, evaluate without and with BN adaptation."""
    t0 = time.perf_counter()
    fp = cfg.fingerprint()
    names = [cell_name(hsm, ds, False), cell_name(hsm, ds, True)]
    try:
        world = build_world(cfg.world)
        real_train, test = real_splits(cfg, world, seed)
        clf, history = train_generated(cfg, world, seed, hsm, r, test)
        acc = evaluate(clf, test)
        shift = bn_shift_report(clf, world.generate_batch(
            world.sample_latent(stream(seed, "shift-probe"), len(real_train)), real_train.y), real_train)
        adapted, summary = apply_bna(cfg, clf, real_train, seed)
        acc_bna = evaluate(adapted, test)
        elapsed = time.perf_counter() - t0
        base = dict(fingerprint=fp, seed=seed, replacement_fraction=r, history=history, wall_clock=elapsed)
        return [
            MetricsRecord(cell=names[0], toggles={"hsm": hsm, "ds": ds, "bna": False}, accuracy=acc,
                          extra={"bn_shift": shift}, **base),
            MetricsRecord(cell=names[1], toggles={"hsm": hsm, "ds": ds, "bna": True}, accuracy=acc_bna,
                          extra={"bn_shift": shift, "bna": _moment_summary(summary)}, **base),
        ]
    except Exception as exc:
        log.error("cell %s seed %d failed: %s", names[0], seed, exc)
        err = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return [MetricsRecord(fingerprint=fp, seed=seed, cell=n, toggles={"hsm": hsm, "ds": ds, "bna": b},
                              replacement_fraction=r, accuracy=None, error=err)
                for n, b in zip(names, (False, True))]


def run_real_reference(cfg: ExperimentConfig, seed: int) -> MetricsRecord:
    t0 = time.perf_counter()
    fp = cfg.fingerprint()
    try:
        world = build_world(cfg.world)
        real_train, test = real_splits(cfg, world, seed)
        clf = new_classifier(cfg, world, seed)
        history = train_fixed(clf, real_train, cfg.train, stream(seed, "shuffle"),
                              on_epoch=lambda rec, c: rec.update(eval_accuracy=evaluate(c, test)))
        return MetricsRecord(fp, seed, "real", {}, 0.0, evaluate(clf, test), history,
                             wall_clock=time.perf_counter() - t0)
    except Exception as exc:
        log.error("real reference seed %d failed: %s", seed, exc)
        return MetricsRecord(fp, seed, "real", {}, 0.0, None, error=f"{type(exc).__name__}: {exc}")


def _run_job(job) -> list[MetricsRecord]:
    kind, cfg, seed, args = job
    if kind == "real":
        return [run_real_reference(cfg, seed)]
    return run_pair(cfg, seed, *args)


def _execute(jobs: list, workers: int) -> list[MetricsRecord]:
    if workers <= 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    return [rec for group in results for rec in group]


# ------------------------------------------------------------------ experiments


def run_ablation(cfg: ExperimentConfig, workers: int = 1) -> list[MetricsRecord]:
    """All eight (hsm, ds, bna) cells plus the real-data reference, for every seed.

    Fixed-dataset cells use ``r = 0``; smoothing cells use ``methods.replacement_fraction``.
    """
    r = cfg.methods.replacement_fraction
    jobs = []
    for seed in cfg.seeds:
        for ds, hsm in product((False, True), (False, True)):
            jobs.append(("pair", cfg, seed, (hsm, r if ds else 0.0, ds)))
        jobs.append(("real", cfg, seed, ()))
    return _execute(jobs, workers)


def run_r_sweep(cfg: ExperimentConfig, workers: int = 1) -> list[MetricsRecord]:
    """Smoothing without mining at every ``r`` in the grid, with and without BN adaptation."""
    jobs = [("pair", cfg, seed, (False, r, r > 0)) for r in cfg.sweep.r_grid for seed in cfg.seeds]
    records = _execute(jobs, workers)
    for rec in records:
        rec.cell = f"r={rec.replacement_fraction:g}" + ("+bna" if rec.toggles.get("bna") else "")
    return records


def run_single(cfg: ExperimentConfig, workers: int = 1) -> list[MetricsRecord]:
    """One cell, the one selected by ``methods``, over all seeds."""
    m = cfg.methods
    r = m.replacement_fraction if m.ds else 0.0
    records = _execute([("pair", cfg, seed, (m.hsm, r, m.ds)) for seed in cfg.seeds], workers)
    return [rec for rec in records if rec.toggles["bna"] == m.bna]


# --------------------------------------------------------------------- summaries


def summarize(records: list[MetricsRecord]) -> list[dict]:
    """Mean, std and standard error of accuracy per cell, in first-seen order."""
    groups: dict[str, list[MetricsRecord]] = {}
    for rec in records:
        groups.setdefault(rec.cell, []).append(rec)
    rows = []
    for cell, recs in groups.items():
        accs = np.array([r.accuracy for r in recs if r.accuracy is not None], dtype=np.float64)
        n = len(accs)
        std = float(accs.std(ddof=1)) if n > 1 else 0.0
        rows.append({
            "cell": cell,
            "hsm": recs[0].toggles.get("hsm", ""),
            "ds": recs[0].toggles.get("ds", ""),
            "bna": recs[0].toggles.get("bna", ""),
            "replacement_fraction": recs[0].replacement_fraction,
            "n": n,
            "failed": len(recs) - n,
            "mean": float(accs.mean()) if n else float("nan"),
            "std": std,
            "se": std / float(np.sqrt(n)) if n else float("nan"),
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'cell':<16s} {'r':>5s} {'mean%':>7s} {'std':>6s} {'n':>3s}"]
    for row in rows:
        lines.append(f"{row['cell']:<16s} {row['replacement_fraction']:>5.2f} "
                     f"{100 * row['mean']:>7.2f} {100 * row['std']:>6.2f} {row['n']:>3d}")
    return "\n".join(lines)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def emit_metrics(records: list[MetricsRecord], cfg: ExperimentConfig, out_dir, name: str) -> dict:
    """Write per-run records, a flat summary table, provenance and a timing log.

    ``runs/*.json``, ``<name>_summary.csv``, ``<name>_run_log.jsonl`` (one line
    per epoch per run) and ``provenance.json`` depend only on config and
    seeds. Wall-clock times are appended to ``timing.jsonl``.
    """
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    paths = {}
    for rec in records:
        p = out / "runs" / f"{name}__{rec.cell}__seed{rec.seed}.json"
        p.write_text(_json(rec.to_dict()))
    rows = summarize(records)
    buf = io.StringIO()
    fields = list(rows[0]) if rows else ["cell", "hsm", "ds", "bna", "replacement_fraction", "n",
                                         "failed", "mean", "std", "se"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    paths["summary"] = out / f"{name}_summary.csv"
    paths["summary"].write_text(buf.getvalue())
    paths["provenance"] = out / "provenance.json"
    paths["provenance"].write_text(_json({
        "fingerprint": cfg.fingerprint(),
        "seeds": list(cfg.seeds),
        "artifact_version": artifact_version(),
        "config": cfg.to_dict(),
    }))
    (out / "config.yaml").write_text(dumps_config(cfg))
    with open(out / f"{name}_run_log.jsonl", "w") as fh:
        for rec in records:
            for ep in rec.history:
                fh.write(json.dumps({"experiment": name, "cell": rec.cell, "seed": rec.seed, **ep},
                                    sort_keys=True) + "\n")
    with open(out / "timing.jsonl", "a") as fh:
        for rec in records:
            fh.write(json.dumps({"experiment": name, "cell": rec.cell, "seed": rec.seed,
                                 "wall_clock": rec.wall_clock}) + "\n")
    return paths

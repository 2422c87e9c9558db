"""Experiment orchestration: sweeps over seeds and settings, manifests and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .config import ORACLE_POINT, ExperimentConfig, SweepPoint, format_config
from .data import Dataset, generate_synthetic, read_dataset
from .engine import TaskOutcome, TaskStream, build_stream, run_stream, train_task
from .errors import ContractError, S2ILError
from .exemplar import ExemplarStore
from .metrics import RunRecord, oracle_deviation, summary
from .netlib import save_snapshot

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FAILED_MARKER = "FAILED"
METRIC_KEYS = ("aia", "bt", "fgt", "final_acc")


@dataclass
class RunResult:
    point: SweepPoint
    seed: int
    record: RunRecord
    checksums: list[str]
    initial_checksum: str
    exemplars: dict[str, list[int]] = field(default_factory=dict)
    deviation: dict[int, float] = field(default_factory=dict)
    excluded_channels: dict[int, list[int]] = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.path is not None:
        return read_dataset(d.path)
    return generate_synthetic(d.classes, d.per_class, d.image_size, d.seed, d.channels,
                              noise=d.noise, blob_gain=d.blob_gain)


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.images, ds.labels, ds.is_test):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _exemplar_store(cfg: ExperimentConfig) -> ExemplarStore:
    e = cfg.exemplar
    return ExemplarStore(e.policy, e.budget, e.per_class)


def _model_spec(cfg: ExperimentConfig, ds: Dataset) -> dict:
    c, h, w = ds.image_shape
    if h != w:
        raise ContractError(f"images must be square, got {h}x{w}")
    return cfg.model.spec(c, h)


def train_base(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> TaskOutcome:
    """Task 0 for ``seed``; identical for every sweep point, so it is trained once."""
    tc = dataclasses.replace(cfg.train, seed=seed, distill="none", oracle=False)
    T.set_default_dtype(tc.dtype)
    return train_task(None, stream, 0, _exemplar_store(cfg), tc, model_spec=_model_spec(cfg, stream.dataset))


def run_point(cfg: ExperimentConfig, stream: TaskStream, point: SweepPoint, seed: int,
              base: TaskOutcome | None = None, checkpoint_dir: Path | None = None) -> RunResult:
    tc = point.train_config(cfg.train, seed)
    ssim = point.ssim_params(cfg.ssim)
    initial = []

    def on_task(t, model):
        if t == 0:
            initial.append(model.checksum())
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            (checkpoint_dir / f"{point.name}_s{seed}_t{t}.s2md").write_bytes(save_snapshot(model))

    res = run_stream(stream, tc, ssim, _exemplar_store(cfg), model_spec=_model_spec(cfg, stream.dataset),
                     gradcam=cfg.gradcam, herding_normalize=cfg.exemplar.herding_normalize,
                     on_task=on_task, base=base)
    return RunResult(point, seed, res.record, res.checksums, initial[0], res.exemplars.to_dict())


def _seed_job(args) -> list[RunResult]:
    cfg, stream, points, seed, ckpt = args
    base = train_base(cfg, stream, seed)
    return [run_point(cfg, stream, p, seed, base, ckpt) for p in points]


def attach_deviation(results: list[RunResult], base_classes: list[int]) -> None:
    """Per-class deviation of each run's importance drift from the same-seed oracle."""
    oracles = {r.seed: r for r in results if r.point.oracle}
    for r in results:
        o = oracles.get(r.seed)
        if r.point.oracle or o is None or not r.record.alphas:
            continue
        last = max(r.record.alphas)
        for c in base_classes:
            excluded: list[int] = []
            try:
                r.deviation[c] = oracle_deviation(r.record.alphas[last][c], r.record.alphas[0][c],
                                                  o.record.alphas[last][c], o.record.alphas[0][c],
                                                  diagnostics=excluded)
            except ContractError as err:
                logger.warning("deviation for class %d (%s, seed %d): %s", c, r.point.name, r.seed, err)
                r.deviation[c] = float("nan")
            if excluded:
                r.excluded_channels[c] = excluded


def aggregate(results: list[RunResult]) -> dict[str, dict[str, Any]]:
    """Per-seed values and mean/std (population) of each metric, per sweep point."""
    out: dict[str, dict[str, Any]] = {}
    names = list(dict.fromkeys(r.point.name for r in results))
    for name in names:
        runs = [r for r in results if r.point.name == name]
        entry: dict[str, Any] = {}
        sums = [summary(r.record) for r in runs]
        for key in METRIC_KEYS:
            vals = [s[key] for s in sums if key in s]
            if vals:
                entry[key] = {"per_seed": dict(zip([r.seed for r in runs], vals)),
                              "mean": float(np.mean(vals)), "std": float(np.std(vals))}
        devs = [r.deviation for r in runs if r.deviation]
        if devs:
            classes = sorted(devs[0])
            entry["deviation"] = {str(c): float(np.nanmean([d[c] for d in devs])) for c in classes}
        out[name] = entry
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute every sweep point for every seed and write the reports.

    Runs for different seeds go to separate worker processes when
    ``S2IL_THREADS`` is above one. On failure the results gathered so far are
    written with ``status = "failed"`` next to a ``FAILED`` marker file and the
    error is re-raised.
    """
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    manifest: dict[str, Any] = {"status": "running", "config": format_config(cfg),
                                "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    results: list[RunResult] = []
    try:
        ds = load_dataset(cfg)
        stream = build_stream(ds, cfg.stream.base, cfg.stream.increment, cfg.stream.class_order_seed)
        manifest["dataset"] = {"samples": len(ds), "classes": ds.num_classes, "digest": dataset_digest(ds)}
        manifest["class_order"] = [list(t.classes) for t in stream.tasks]
        points = cfg.sweep_points()
        if cfg.sweep.include_oracle:
            points.append(ORACLE_POINT)
        ckpt = out / "checkpoints" if cfg.output.checkpoints else None
        jobs = [(cfg, stream, points, seed, ckpt) for seed in cfg.seeds]
        workers = max(1, int(os.environ.get("S2IL_THREADS", "1")))
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
                for batch in pool.map(_seed_job, jobs):
                    results.extend(batch)
        else:
            for job in jobs:
                results.extend(_seed_job(job))
        attach_deviation(results, stream.tasks[0].classes)
        manifest["status"] = "ok"
    except (S2ILError, OSError) as err:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(err).__name__}: {err}"
        raise
    finally:
        manifest["runs"] = [_run_entry(r) for r in results]
        if results and manifest["status"] == "ok":
            manifest["aggregate"] = aggregate(results)
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        write_reports(manifest, results, out)
        if manifest["status"] != "ok":
            (out / FAILED_MARKER).write_text(manifest.get("error", "run did not complete") + "\n")
    return manifest


def _run_entry(r: RunResult) -> dict[str, Any]:
    rec = r.record
    entry = {"point": r.point.name, "mode": "oracle" if r.point.oracle else r.point.mode, "seed": r.seed,
             "accuracy": rec.acc, "overall": rec.overall,
             "lambda": [x.get("lam") for x in rec.extras], "checksums": r.checksums,
             "initial_checksum": r.initial_checksum, "metrics": summary(rec) if rec.complete else {},
             "exemplars": r.exemplars}
    if r.deviation:
        entry["deviation"] = {str(c): v for c, v in r.deviation.items()}
        entry["excluded_channels"] = {str(c): v for c, v in r.excluded_channels.items()}
    return entry


def write_reports(manifest: dict, results: list[RunResult], out: Path) -> None:
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True, allow_nan=True))
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "seed", "after_task", "eval_task", "accuracy"])
        for r in results:
            for t, row in enumerate(r.record.acc):
                for i, a in enumerate(row):
                    w.writerow([r.point.name, r.seed, t, i, repr(a)])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "seed", *METRIC_KEYS])
        for r in results:
            if r.record.complete:
                s = summary(r.record)
                w.writerow([r.point.name, r.seed, *[repr(s.get(k, float("nan"))) for k in METRIC_KEYS]])
        for name, entry in manifest.get("aggregate", {}).items():
            for stat in ("mean", "std"):
                w.writerow([name, stat, *[repr(entry[k][stat]) if k in entry else "" for k in METRIC_KEYS]])
    if any(r.deviation for r in results):
        with open(out / "deviation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point", "seed", "class", "deviation"])
            for r in results:
                for c, v in sorted(r.deviation.items()):
                    w.writerow([r.point.name, r.seed, c, repr(v)])


def read_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as err:
        raise ContractError(f"no manifest at {path}: {err}") from err


def format_report(manifest: dict) -> str:
    """Plain-text mean ± std table of the aggregated metrics."""
    lines = [f"status: {manifest.get('status')}"]
    agg = manifest.get("aggregate", {})
    if not agg:
        lines.append("no aggregated metrics")
        return "\n".join(lines)
    width = max(len(n) for n in agg) + 2
    lines.append("point".ljust(width) + "".join(k.rjust(18) for k in METRIC_KEYS))
    for name, entry in agg.items():
        cells = []
        for k in METRIC_KEYS:
            cells.append((f"{entry[k]['mean']:.2f} ± {entry[k]['std']:.2f}" if k in entry else "-").rjust(18))
        lines.append(name.ljust(width) + "".join(cells))
    for name, entry in agg.items():
        if "deviation" in entry:
            devs = ", ".join(f"{c}: {v:.4g}" for c, v in entry["deviation"].items())
            lines.append(f"{name} oracle deviation per base class: {devs}")
    return "\n".join(lines)

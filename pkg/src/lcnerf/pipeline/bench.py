"""Iso-iteration benchmark: run a matrix of configs under one budget and collect a CSV.

A matrix file is TOML::

    record_at = [10, 200]          # optional, shared by every run

    [base]                         # a full or partial run config
    run = { iterations = 200, dataset = "fixtures/spheres" }

    [[runs]]
    label = "conv"
    variant = "conv"               # any config key, bare or as "section.key"
"""
from __future__ import annotations

import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from ..errors import ConfigError
from .config import RunConfig
from .data import DatasetBundle, downsample_bundle, load_synthetic_dataset
from .train import MetricsRow, record_iterations, run_id_for, run_training, write_metrics_csv

log = logging.getLogger(__name__)


@dataclass
class BenchMatrix:
    base: RunConfig
    runs: list[dict]
    record_at: list[int] = field(default_factory=list)

    def configs(self) -> list[RunConfig]:
        out = []
        for entry in self.runs:
            entry = dict(entry)
            label = entry.pop("label", None)
            if label is None:
                raise ConfigError("every [[runs]] entry needs a label")
            cfg = self.base.with_overrides(entry)
            cfg.run.label = str(label)
            out.append(cfg)
        labels = [c.run.label for c in out]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate run labels in matrix: {labels}")
        return out


def load_matrix(path) -> BenchMatrix:
    try:
        raw = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(raw) - {"base", "runs", "record_at"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    runs = raw.get("runs") or []
    if not runs:
        raise ConfigError(f"{path}: matrix needs at least one [[runs]] entry")
    base = RunConfig.from_dict(raw.get("base", {}))
    return BenchMatrix(base, runs, [int(i) for i in raw.get("record_at", [])])


def failed_rows(cfg: RunConfig, record_at) -> list[MetricsRow]:
    nan = math.nan
    its = record_iterations(cfg, record_at) or [cfg.run.iterations]
    return [MetricsRow(run_id_for(cfg), cfg.run.label, it, nan, nan, nan, nan, nan) for it in its]


class _DataCache:
    def __init__(self, data: DatasetBundle | None):
        self.data = data
        self.cache: dict = {}

    def get(self, cfg: RunConfig) -> DatasetBundle:
        if self.data is not None:
            key = ("memory", cfg.run.downsample)
            if key not in self.cache:
                self.cache[key] = downsample_bundle(self.data, cfg.run.downsample)
            return self.cache[key]
        key = (cfg.run.dataset, cfg.run.downsample, cfg.depth.keypoints)
        if key not in self.cache:
            if not cfg.run.dataset:
                raise ConfigError(f"run {cfg.run.label!r} has no dataset")
            self.cache[key] = load_synthetic_dataset(cfg.run.dataset, cfg.run.downsample,
                                                     cfg.depth.keypoints or None)
        return self.cache[key]


def _run_one(cfg: RunConfig, data: DatasetBundle, out_dir: Path, record_at):
    try:
        result = run_training(cfg, data, out_dir / cfg.run.label, record_at)
        return result.metrics, None
    except Exception as exc:  # a failed run must not take the matrix down
        log.error("run %s failed: %s", cfg.run.label, exc)
        log.debug("%s", traceback.format_exc())
        return failed_rows(cfg, record_at), f"{type(exc).__name__}: {exc}"


def _run_one_remote(cfg_dict, data, out_dir, record_at):
    return _run_one(RunConfig.from_dict(cfg_dict), data, Path(out_dir), record_at)


@dataclass
class BenchResult:
    rows: list[MetricsRow]
    failures: dict[str, str]
    csv_path: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def benchmark(matrix: BenchMatrix | list[RunConfig], out_dir, data: DatasetBundle | None = None,
              record_at=None, workers: int = 0) -> BenchResult:
    """Run every config for its configured iterations; write ``bench.csv`` under ``out_dir``.

    ``workers > 1`` runs configs in separate processes. Each run writes to
    ``out_dir/<label>`` so labels must be unique, which ``BenchMatrix`` enforces.
    """
    if isinstance(matrix, BenchMatrix):
        configs = matrix.configs()
        record_at = record_at if record_at is not None else (matrix.record_at or None)
    else:
        configs = list(matrix)
    if not configs:
        raise ConfigError("benchmark needs at least one config")
    labels = [c.run.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("benchmark labels must be unique (they name the output dirs)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = _DataCache(data)
    rows: list[MetricsRow] = []
    failures: dict[str, str] = {}

    def datasets():
        for cfg in configs:
            try:
                yield cfg, cache.get(cfg), None
            except Exception as exc:
                yield cfg, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = []
            for cfg, bundle, err in datasets():
                if err:
                    futures.append((cfg, None, err))
                else:
                    futures.append((cfg, pool.submit(_run_one_remote, cfg.to_dict(), bundle,
                                                     str(out), record_at), None))
            for cfg, fut, err in futures:
                got, err = (failed_rows(cfg, record_at), err) if fut is None else fut.result()
                rows.extend(got)
                if err:
                    failures[cfg.run.label] = err
    else:
        for cfg, bundle, err in datasets():
            t0 = time.perf_counter()
            if err is None:
                got, err = _run_one(cfg, bundle, out, record_at)
            else:
                got = failed_rows(cfg, record_at)
            rows.extend(got)
            if err:
                failures[cfg.run.label] = err
            log.info("bench %s done in %.1fs", cfg.run.label, time.perf_counter() - t0)
    csv_path = out / "bench.csv"
    write_metrics_csv(csv_path, rows)
    return BenchResult(rows, failures, csv_path)

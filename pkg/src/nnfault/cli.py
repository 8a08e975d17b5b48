"""``nnfault`` command line: train, inject, sweep, bench, report.

Every command reads a YAML config (``--config``), lets flags override it,
validates the result before doing any work and prints a one-line JSON
summary on stdout. Exit status: 0 ok, 1 runtime failure, 2 bad config.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import click
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import zoo
from .campaign import SweepConfig, run_overhead_bench, run_sweep
from .errors import ConfigError, NnFaultError
from .faultspec import CaptureMode, Fault, FaultKind, Monitor, SiteType, TargetType
from .injector import run, setup
from .modelio import load_model, save_model
from .nn import accuracy, train_sgd
from .store import export_csv, open_store

log = logging.getLogger("nnfault")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    path: Optional[str] = None
    zoo: Optional[Literal["mlp", "cnn", "snn"]] = None
    seed: Optional[int] = None
    options: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.zoo is None):
            raise ValueError("give exactly one of 'path' or 'zoo'")
        return self


class DatasetSpec(_Strict):
    kind: Literal["blobs", "events"] = "blobs"
    n: int = Field(1000, ge=2)
    d: int = Field(64, ge=1)
    n_classes: int = Field(10, ge=2)
    spread: float = Field(0.3, ge=0)
    time_steps: int = Field(20, ge=1)
    rate_per_class: Union[float, list[float]] = 0.15
    background: float = Field(0.05, ge=0, lt=1)
    test_fraction: float = Field(0.3, gt=0, lt=1)
    seed: Optional[int] = None


class TrainSpec(_Strict):
    epochs: int = Field(30, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(32, ge=1)
    weight_decay: float = Field(0.03, ge=0)


class FaultSpec(_Strict):
    layer: str
    target: TargetType = TargetType.WEIGHT
    site: SiteType = SiteType.DENSE_FLOAT
    kind: FaultKind = FaultKind.BIT_FLIP
    elements: list[list[int]]
    bits: list[list[int]]


class MonitorSpec(_Strict):
    monitor: str
    target: TargetType = TargetType.OUTPUT
    capture: CaptureMode = CaptureMode.SUMMARY


class SweepSpec(_Strict):
    target: TargetType = TargetType.WEIGHT
    site: SiteType = SiteType.DENSE_FLOAT
    kind: FaultKind = FaultKind.BIT_FLIP
    rates: Optional[list[float]] = None
    layers: Optional[list[str]] = None
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    control: bool = False
    bits: Optional[list[int]] = None
    batch_size: int = Field(256, ge=1)


class BenchSpec(_Strict):
    fault_counts: list[int] = Field(default_factory=lambda: [1, 10, 100, 1000, 10_000, 100_000])
    repetitions: int = Field(5, ge=1)
    warmup: int = Field(1, ge=0)
    batch_size: int = Field(256, ge=1)
    # timed inputs, drawn like the dataset section but larger so inference dominates
    n_inputs: int = Field(10_000, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    store: Optional[str] = None
    out: str = "out"
    workers: int = Field(1, ge=1)
    model: Optional[ModelSpec] = None
    dataset: Optional[DatasetSpec] = None
    train: Optional[TrainSpec] = None
    injections: list[Union[FaultSpec, MonitorSpec]] = Field(default_factory=list)
    sweep: Optional[SweepSpec] = None
    bench: Optional[BenchSpec] = None


REQUIRED = {
    "train": ("model", "dataset"),
    "inject": ("model", "dataset"),
    "sweep": ("model", "dataset", "sweep"),
    "bench": ("model", "dataset"),
}


def load_config(path: str | None, command: str, **overrides) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping at top level")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        msgs = ["{}: {}".format(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"])
                for err in e.errors()]
        raise ConfigError("; ".join(msgs)) from e
    for section in REQUIRED.get(command, ()):
        if getattr(cfg, section) is None:
            raise ConfigError(f"{section}: section required for '{command}'")
    if command == "train" and cfg.model.zoo is None:
        raise ConfigError("model.zoo: 'train' builds a zoo model")
    return cfg


# -- builders -----------------------------------------------------------------


def _dataset_id(spec: DatasetSpec, seed: int) -> str:
    return f"{spec.kind}-n{spec.n}-s{seed}"


def make_dataset(spec: DatasetSpec, seed: int):
    """The full dataset for ``spec``; event datasets have ``d`` features per step."""
    if spec.kind == "blobs":
        return zoo.make_blobs(spec.n, spec.d, spec.n_classes, spec.spread, seed)
    return zoo.make_events(spec.n, spec.time_steps, spec.d, spec.n_classes, spec.rate_per_class,
                           seed, spec.background)


def build_dataset(spec: DatasetSpec, seed: int):
    """(train, test) splits for ``spec``."""
    return zoo.train_test_split(make_dataset(spec, seed), spec.test_fraction, seed)


def train_model(mspec: ModelSpec, tspec: TrainSpec, train_ds, seed: int):
    model = zoo.build(mspec.zoo, seed, **mspec.options)
    if model.is_spiking:
        return zoo.train_snn_readout(model, train_ds, seed=seed)
    return train_sgd(model, train_ds, tspec.epochs, tspec.learning_rate, tspec.batch_size, seed,
                     weight_decay=tspec.weight_decay)


def resolve_model(cfg: RunConfig, train_ds):
    m = cfg.model
    if m.path is not None:
        if not (Path(m.path) / "manifest.json").exists():
            raise ConfigError(f"model.path: no model at {m.path}")
        return load_model(m.path), Path(m.path).name
    seed = cfg.seed if m.seed is None else m.seed
    return train_model(m, cfg.train or TrainSpec(), train_ds, seed), f"{m.zoo}-s{seed}"


def _injections(specs):
    out = []
    for s in specs:
        if isinstance(s, MonitorSpec):
            out.append(Monitor(s.monitor, s.target, s.capture))
        else:
            out.append(Fault(s.layer, s.target, s.site, tuple(map(tuple, s.elements)),
                             tuple(map(tuple, s.bits)), s.kind))
    return out


def _emit(summary: dict) -> None:
    click.echo(json.dumps(summary, sort_keys=True))


def _fail(e: Exception) -> None:
    if isinstance(e, ConfigError):
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    click.echo(f"error: {type(e).__name__}: {e}", err=True)
    sys.exit(1)


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (NnFaultError, OSError, ValueError, KeyError) as e:
            log.debug("failure", exc_info=True)
            _fail(e)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def common(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file."),
        click.option("--seed", type=int, help="Global seed; overrides the config."),
        click.option("--store", type=click.Path(dir_okay=False), help="SQLite store path."),
        click.option("--workers", type=int, help="Worker processes for sweeps."),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
        click.option("--verbose", "-v", is_flag=True, help="Debug logging on stderr."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _prepare(command, config_path, seed, store, workers, out, verbose) -> RunConfig:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(config_path, command, seed=seed, store=store, workers=workers, out=out)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


@click.group()
def main():
    """Bit-level fault injection campaigns on small numpy networks."""


@main.command("train")
@common
@_guard
def cmd_train(config_path, seed, store, workers, out, verbose):
    """Train a zoo model on a synthetic dataset and write the model file."""
    cfg = _prepare("train", config_path, seed, store, workers, out, verbose)
    dseed = cfg.seed if cfg.dataset.seed is None else cfg.dataset.seed
    train_ds, test_ds = build_dataset(cfg.dataset, dseed)
    model, model_id = resolve_model(cfg, train_ds)
    base = accuracy(model, test_ds)
    model.meta["baseline_accuracy"] = base
    path = save_model(Path(cfg.out) / model_id, model)
    eid = None
    if cfg.store:
        with open_store(cfg.store) as st:
            eid = st.new_experiment_id(f"train-{model_id}")
            st.record_experiment(eid, "train", cfg.model_dump(mode="json"), model_id,
                                 _dataset_id(cfg.dataset, dseed), base)
            st.finish_experiment(eid)
    _emit({"command": "train", "model": str(path), "baseline_accuracy": base, "experiment_id": eid})


@main.command("inject")
@common
@_guard
def cmd_inject(config_path, seed, store, workers, out, verbose):
    """One arm / run / restore cycle with the literal injection list."""
    cfg = _prepare("inject", config_path, seed, store, workers, out, verbose)
    dseed = cfg.seed if cfg.dataset.seed is None else cfg.dataset.seed
    train_ds, test_ds = build_dataset(cfg.dataset, dseed)
    model, model_id = resolve_model(cfg, train_ds)
    handler = setup(model, _injections(cfg.injections), seed=cfg.seed)
    try:
        res = run(handler, test_ds)
    finally:
        handler.restore()
    eid = None
    if cfg.store:
        with open_store(cfg.store) as st:
            eid = st.new_experiment_id(f"inject-{model_id}")
            handler.experiment_id = eid
            for r in res.records:
                r.experiment_id = eid
            st.record_experiment(eid, "inject", cfg.model_dump(mode="json"), model_id,
                                 _dataset_id(cfg.dataset, dseed), model.meta.get("baseline_accuracy"))
            st.record_metric(eid, None, "*", cfg.seed, res.metrics["accuracy"], len(res.trace), 0.0)
            st.record_faults(eid, None, cfg.seed, res.trace)
            st.record_monitors(res.records)
            st.finish_experiment(eid)
    _emit({"command": "inject", "accuracy": res.metrics["accuracy"], "faults": len(res.trace),
           "monitor_records": len(res.records), "experiment_id": eid})


@main.command("sweep")
@common
@_guard
def cmd_sweep(config_path, seed, store, workers, out, verbose):
    """Fault-rate sweep, one layer at a time; writes metrics.csv."""
    cfg = _prepare("sweep", config_path, seed, store, workers, out, verbose)
    if not cfg.store:
        raise ConfigError("store: a sweep needs a store")
    dseed = cfg.seed if cfg.dataset.seed is None else cfg.dataset.seed
    train_ds, test_ds = build_dataset(cfg.dataset, dseed)
    model, model_id = resolve_model(cfg, train_ds)
    scfg = SweepConfig(model_id, _dataset_id(cfg.dataset, dseed), workers=cfg.workers,
                       **cfg.sweep.model_dump())
    with open_store(cfg.store) as st:
        result = run_sweep(scfg, model, test_ds, st)
        csv_path = export_csv(st, Path(cfg.out) / "metrics.csv", result.experiment_id)
    _emit({"command": "sweep", "experiment_id": result.experiment_id, "cells": len(result.cells),
           "errors": len(result.errors()), "baseline_accuracy": result.baseline_accuracy,
           "csv": str(csv_path)})


@main.command("bench")
@common
@_guard
def cmd_bench(config_path, seed, store, workers, out, verbose):
    """Injection overhead against the number of weight faults; writes bench.csv."""
    cfg = _prepare("bench", config_path, seed, store, workers, out, verbose)
    b = cfg.bench or BenchSpec()
    dseed = cfg.seed if cfg.dataset.seed is None else cfg.dataset.seed
    train_ds, _ = build_dataset(cfg.dataset, dseed)
    model, model_id = resolve_model(cfg, train_ds)
    bench_ds = make_dataset(cfg.dataset.model_copy(update={"n": b.n_inputs}), dseed)
    rows = run_overhead_bench(model, bench_ds, b.fault_counts, b.repetitions, b.warmup, cfg.seed,
                              batch_size=b.batch_size)
    path = Path(cfg.out) / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["k", "t_median_s", "overhead"])
        for r in rows:
            w.writerow([r.k, repr(r.t_median_s), repr(r.overhead)])
    eid = None
    if cfg.store:
        total = model.n_weights()
        with open_store(cfg.store) as st:
            eid = st.new_experiment_id(f"bench-{model_id}")
            st.record_experiment(eid, "bench", cfg.model_dump(mode="json"), model_id,
                                 _dataset_id(cfg.dataset, dseed), rows[0].accuracy)
            for r in rows:
                st.record_metric(eid, r.k / total, "*", cfg.seed, r.accuracy, r.k, r.t_median_s)
            st.finish_experiment(eid)
    _emit({"command": "bench", "csv": str(path), "experiment_id": eid,
           "overhead": {str(r.k): r.overhead for r in rows}})


@main.command("report")
@common
@_guard
def cmd_report(config_path, seed, store, workers, out, verbose):
    """Per-figure CSVs from a store: accuracy_vs_rate.csv and overhead.csv."""
    cfg = _prepare("report", config_path, seed, store, workers, out, verbose)
    if not cfg.store:
        raise ConfigError("store: report needs a store")
    if not Path(cfg.store).exists():
        raise ConfigError(f"store: {cfg.store} does not exist")
    outdir = Path(cfg.out)
    with open_store(cfg.store) as st:
        acc_rows, ovh_rows = report_rows(st)
    _write_csv(outdir / "accuracy_vs_rate.csv", ["experiment_id", "rate", "min_accuracy"], acc_rows)
    _write_csv(outdir / "overhead.csv", ["experiment_id", "k", "overhead"], ovh_rows)
    _emit({"command": "report", "accuracy_rows": len(acc_rows), "overhead_rows": len(ovh_rows),
           "out": str(outdir)})


def report_rows(st):
    """Min-over-layers accuracy per (sweep, rate) and overhead per (bench, k); read-only."""
    acc_rows, ovh_rows = [], []
    for exp in st.experiments("sweep"):
        # min over layers per seed, then the mean over seeds
        by_rate: dict[float, dict[int, float]] = {}
        for m in st.metrics(exp["experiment_id"]):
            if m["accuracy"] is not None:
                s = by_rate.setdefault(m["rate"], {})
                s[m["seed"]] = min(s.get(m["seed"], math.inf), m["accuracy"])
        for rate in sorted(by_rate):
            acc_rows.append([exp["experiment_id"], repr(rate),
                             format(float(np.mean(list(by_rate[rate].values()))), ".6g")])
    for exp in st.experiments("bench"):
        ms = st.metrics(exp["experiment_id"])
        base = next((m["wall_time_s"] for m in ms if m["fault_count"] == 0), None)
        for m in sorted(ms, key=lambda m: m["fault_count"]):
            ovh = 0.0 if m["fault_count"] == 0 else m["wall_time_s"] / base - 1.0
            ovh_rows.append([exp["experiment_id"], m["fault_count"], repr(ovh)])
    return acc_rows, ovh_rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


if __name__ == "__main__":
    main()

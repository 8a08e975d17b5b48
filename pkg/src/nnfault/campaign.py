"""Fault-rate sweeps and the injection overhead benchmark.

A sweep evaluates every (rate, layer, seed) *cell* independently: sample
faults for that cell, arm them, score the test split, restore. Per rate the
campaign keeps the lowest accuracy over layers. Cells are pure functions of
(model, dataset, config, cell key), so they can run in worker processes on
cloned models; results are funneled back to one writer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NnFaultError
from .faultspec import (
    FaultArray,
    FaultKind,
    SiteType,
    TargetType,
    fault_count,
    sample_fault_array,
    sample_fault_arrays,
)
from .injector import FaultTrace, run, setup, target_shape
from .nn import PARAMETRIC, Model, accuracy
from .rng import derive_seed

log = logging.getLogger(__name__)


def rate_grid() -> list[float]:
    """Nine points per decade from 1e-7 to 9e-1, then 1.0 (64 values, ascending).

    Values are the correctly rounded doubles of the decimal literals
    (``3e-7``, not ``3 * 1e-7``).
    """
    rates = [float(f"{m}e-{e}") for e in range(7, 0, -1) for m in range(1, 10)]
    return rates + [1.0]


@dataclass
class SweepConfig:
    model_id: str = "model"
    dataset_id: str = "dataset"
    target: TargetType = TargetType.WEIGHT
    site: SiteType = SiteType.DENSE_FLOAT
    kind: FaultKind = FaultKind.BIT_FLIP
    rates: list[float] | None = None
    layers: list[str] | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1
    control: bool = False
    bits: list[int] | None = None
    batch_size: int = 256

    def __post_init__(self):
        self.target = TargetType(self.target)
        self.site = SiteType(self.site)
        self.kind = FaultKind(self.kind)
        if not self.seeds:
            raise ValueError("a sweep needs at least one seed")
        if self.target is TargetType.WEIGHT and self.site is not SiteType.DENSE_FLOAT:
            raise ValueError(f"{self.site.value} sites exist only for output targets")

    def grid(self) -> list[float]:
        rates = rate_grid() if self.rates is None else [float(r) for r in self.rates]
        # duplicates would collide on the metrics primary key
        return list(dict.fromkeys(([0.0] if self.control else []) + rates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(target=self.target.value, site=self.site.value, kind=self.kind.value)
        return d

    def hash(self) -> str:
        """Stable under key order (JSON with sorted keys); ``workers`` excluded."""
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class CellResult:
    rate: float
    layer: str
    seed: int
    accuracy: float | None
    fault_count: int
    wall_time_s: float
    error: str | None = None
    trace: FaultTrace | None = None


@dataclass
class CampaignResult:
    cells: list[CellResult]
    experiment_id: str = ""
    baseline_accuracy: float | None = None

    def min_per_rate(self) -> dict[float, float]:
        """Lowest accuracy over layers (and seeds) for each rate; failed cells skipped."""
        out: dict[float, float] = {}
        for c in self.cells:
            if c.accuracy is None:
                continue
            out[c.rate] = min(out.get(c.rate, math.inf), c.accuracy)
        return dict(sorted(out.items()))

    def min_per_rate_seed(self) -> dict[tuple[float, int], float]:
        out: dict[tuple[float, int], float] = {}
        for c in self.cells:
            if c.accuracy is not None:
                k = (c.rate, c.seed)
                out[k] = min(out.get(k, math.inf), c.accuracy)
        return out

    def mean_min_per_rate(self) -> dict[float, float]:
        """Per rate: mean over seeds of the min-over-layers accuracy."""
        per: dict[float, list[float]] = {}
        for (rate, _), acc in sorted(self.min_per_rate_seed().items()):
            per.setdefault(rate, []).append(acc)
        return {r: float(np.mean(v)) for r, v in per.items()}

    def errors(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]


def injectable_layers(model: Model, target: TargetType) -> list[str]:
    if TargetType(target) is TargetType.WEIGHT:
        return [l.name for l in model.layers if isinstance(l, PARAMETRIC)]
    return model.layer_names


def cell_seed(seed: int, layer: str, rate: float) -> int:
    return derive_seed(seed, layer, float(rate))


def cell_faults(model: Model, cfg: SweepConfig, rate: float, layer: str, seed: int) -> FaultArray:
    shape = target_shape(model, layer, cfg.target, cfg.site)
    return sample_fault_array(rate, None, shape, layer, cfg.target, cfg.site, cfg.kind,
                              cell_seed(seed, layer, rate), cfg.bits)


def run_cell(model: Model, dataset, cfg: SweepConfig, rate: float, layer: str, seed: int,
             experiment_id: str = "") -> CellResult:
    """Sample, arm, evaluate and restore one cell; injector errors become a tagged result."""
    start = time.perf_counter()
    try:
        faults = cell_faults(model, cfg, rate, layer, seed)
        handler = setup(model, [faults], experiment_id, seed)
        try:
            res = run(handler, dataset, cfg.batch_size)
        finally:
            handler.restore()
    except NnFaultError as e:
        log.warning("cell rate=%g layer=%s seed=%d failed: %s", rate, layer, seed, e)
        n = math.prod(target_shape(model, layer, cfg.target, cfg.site))
        return CellResult(rate, layer, seed, None, fault_count(rate, n),
                          time.perf_counter() - start, f"{type(e).__name__}: {e}")
    return CellResult(rate, layer, seed, res.metrics["accuracy"], len(res.trace),
                      time.perf_counter() - start, None, res.trace)


_worker_state: dict = {}


def _worker_init(model: Model, dataset, cfg: SweepConfig, experiment_id: str) -> None:
    _worker_state.update(model=model.clone(), dataset=dataset, cfg=cfg, eid=experiment_id)


def _worker_cell(key) -> CellResult:
    s = _worker_state
    return run_cell(s["model"], s["dataset"], s["cfg"], *key, experiment_id=s["eid"])


def run_sweep(cfg: SweepConfig, model: Model, dataset, store=None, experiment_id: str | None = None,
              on_cell=None) -> CampaignResult:
    """Evaluate every (rate, layer, seed) cell of ``cfg`` on ``dataset``.

    When ``store`` is given, the experiment, one metric row per cell and the
    fault trace of every cell are written through it, along with the
    fault-free accuracy on ``dataset`` as the experiment's baseline. ``on_cell`` is called
    with each finished :class:`CellResult` in cell order.
    """
    layers = cfg.layers or injectable_layers(model, cfg.target)
    for name in layers:
        target_shape(model, name, cfg.target, cfg.site)
    keys = [(rate, layer, seed) for rate in cfg.grid() for layer in layers for seed in cfg.seeds]
    eid = experiment_id or ""
    baseline = accuracy(model, dataset, batch_size=cfg.batch_size)
    if store is not None:
        eid = store.new_experiment_id(experiment_id or f"sweep-{cfg.hash()[:12]}")
        store.record_experiment(eid, "sweep", cfg.to_dict(), cfg.model_id, cfg.dataset_id, baseline)

    cells: list[CellResult] = []

    def collect(cell: CellResult) -> None:
        if store is not None:
            store.record_cell(eid, cell)
        if on_cell is not None:
            on_cell(cell)
        cell.trace = None  # persisted; do not keep millions of rows in memory
        cells.append(cell)

    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                 initargs=(model, dataset, cfg, eid)) as pool:
            for cell in pool.map(_worker_cell, keys, chunksize=4):
                collect(cell)
    else:
        for rate, layer, seed in keys:
            collect(run_cell(model, dataset, cfg, rate, layer, seed, eid))
    if store is not None:
        store.finish_experiment(eid)
    return CampaignResult(cells, eid, baseline)


# -- overhead benchmark ------------------------------------------------------------


@dataclass
class BenchRow:
    k: int
    t_median_s: float
    overhead: float
    accuracy: float


def model_faults(model: Model, k: int, seed: int, kind: FaultKind = FaultKind.BIT_FLIP,
                 bits=None) -> list[FaultArray]:
    """``k`` distinct weight elements drawn uniformly over all weight tensors of ``model``."""
    layers = model.parametric_layers()
    sizes = np.array([l.weight.size for l in layers])
    flat, picked = sample_fault_arrays(k / sizes.sum(), (int(sizes.sum()),), seed, bits)
    if len(flat) != k:
        # rate * total rounds back to k for every k <= total
        raise AssertionError(f"sampled {len(flat)} faults, wanted {k}")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    owner = np.searchsorted(bounds, flat, side="right") - 1
    return [
        FaultArray(layer.name, TargetType.WEIGHT, SiteType.DENSE_FLOAT,
                   flat[owner == i] - bounds[i], picked[owner == i], kind)
        for i, layer in enumerate(layers)
        if np.any(owner == i)
    ]


def _timed_cycle(model: Model, dataset, faults, batch_size: int) -> tuple[float, float]:
    start = time.perf_counter()
    handler = setup(model, faults)
    res = run(handler, dataset, batch_size)
    handler.restore()
    return time.perf_counter() - start, res.metrics["accuracy"]


def run_overhead_bench(model: Model, dataset, fault_counts=(1, 10, 100, 1000, 10_000, 100_000),
                       repetitions: int = 5, warmup: int = 1, seed: int = 0,
                       kind: FaultKind = FaultKind.BIT_FLIP, batch_size: int = 256) -> list[BenchRow]:
    """Median wall time of setup + run + restore against the number of weight faults.

    ``overhead(k) = t(k) / t(0) - 1`` where ``t(0)`` is the same cycle with
    no faults, measured in the same session. Fault sampling happens before
    timing. Repetitions are interleaved across ``k`` so slow drifts in machine
    load hit every count alike.
    """
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    total = model.n_weights()
    counts = [0] + [int(k) for k in fault_counts if int(k) != 0]
    if max(counts) > total:
        raise ValueError(f"{max(counts)} faults requested but the model has {total} weights")
    faults = {k: model_faults(model, k, derive_seed(seed, "bench", k), kind) for k in counts}
    times: dict[int, list[float]] = {k: [] for k in counts}
    accs: dict[int, float] = {}
    for _ in range(warmup):
        for k in counts:
            _timed_cycle(model, dataset, faults[k], batch_size)
    for _ in range(repetitions):
        for k in counts:
            t, accs[k] = _timed_cycle(model, dataset, faults[k], batch_size)
            times[k].append(t)
    base = statistics.median(times[0])
    rows = []
    for k in counts:
        t = statistics.median(times[k])
        rows.append(BenchRow(k, t, 0.0 if k == 0 else t / base - 1.0, accs[k]))
    return rows

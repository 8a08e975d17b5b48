"""Injection handler: arm faults and monitors on a model, run, restore.

Lifecycle::

    handler = setup(model, [Fault(...), Monitor(...)])   # validate, back up, patch, hook
    result = run(handler, dataset)                        # faulted inference + records
    restore(handler)                                      # weights and hooks back, bit-exact

Weight faults are written into the weight array once at setup (after a
bit-exact backup). Output faults become layer transforms applied on every
forward pass while armed:

* dense float  -- mask the float32 bit patterns directly;
* quantized    -- quantize (x * 2**24, saturating), mask the int32 codes, dequantize;
* sparse index -- convert each sample to COO, mask the uint32 coordinate array,
  scatter back (out-of-range coordinates wrap, later duplicates win).

Output masks are built for one sample and broadcast over the batch. Sparse
masks cover the worst-case index buffer ``[prod(shape), rank]``; rows past a
sample's actual nonzero count are never read.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DoubleArm, EmptyDataset, InvalidFault, NotArmed, UnknownLayer
from .faultspec import (
    CaptureMode,
    Fault,
    FaultArray,
    FaultKind,
    FaultMask,
    Monitor,
    SiteType,
    TargetType,
    apply_mask,
    build_mask,
    flatten_faults,
)
from .nn import PARAMETRIC, Model, forward, predict
from .tensor import DenseTensor, QuantTensor, dequantize, from_bits, quantize, to_bits

_KIND_BY_CODE = {0: FaultKind.BIT_FLIP, 1: FaultKind.STUCK_AT_ZERO, 2: FaultKind.STUCK_AT_ONE}


@dataclass
class MonitorRecord:
    experiment_id: str
    layer: str
    target: TargetType
    capture: CaptureMode
    input_index: int
    timestamp: float
    tensor: DenseTensor | None = None
    summary: dict | None = None


@dataclass
class TraceBlock:
    """All armed faults on one target tensor, as parallel arrays."""

    layer: str
    target: TargetType
    site: SiteType
    element_index: np.ndarray  # flattened into the target shape
    bit_position: np.ndarray
    kind_code: np.ndarray

    def __len__(self) -> int:
        return len(self.element_index)


@dataclass
class FaultTrace:
    blocks: list[TraceBlock] = field(default_factory=list)
    seed: int | None = None

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)

    def rows(self):
        """Yield ``(layer, target, site, kind, element_index, bit_position, seed)``."""
        for b in self.blocks:
            for e, bit, k in zip(b.element_index.tolist(), b.bit_position.tolist(), b.kind_code.tolist()):
                yield (b.layer, b.target.value, b.site.value, _KIND_BY_CODE[k].value, e, bit, self.seed)


@dataclass
class RunResult:
    metrics: dict
    records: list[MonitorRecord]
    trace: FaultTrace
    n_inputs: int


def target_shape(model: Model, layer_name: str, target: TargetType, site: SiteType) -> tuple[int, ...]:
    """Shape of the array a fault on (layer, target, site) indexes into."""
    layer = model.layer(layer_name)
    target, site = TargetType(target), SiteType(site)
    if target is TargetType.WEIGHT:
        if not isinstance(layer, PARAMETRIC):
            raise InvalidFault(f"layer {layer_name!r} ({layer.kind}) has no weights")
        if site is not SiteType.DENSE_FLOAT:
            raise InvalidFault("weight faults use the dense_float site")
        return tuple(layer.weight.shape)
    shape = model.shapes[layer_name]
    if site is SiteType.SPARSE_INDEX:
        return (math.prod(shape), len(shape))
    return tuple(shape)


def _summary(x: np.ndarray) -> dict:
    nan = np.isnan(x)
    n_nan = int(nan.sum())
    if n_nan == x.size:
        return {"min": math.nan, "max": math.nan, "mean": math.nan, "nan_count": n_nan}
    finite_or_inf = x[~nan]
    with np.errstate(all="ignore"):
        return {
            "min": float(finite_or_inf.min()),
            "max": float(finite_or_inf.max()),
            "mean": float(finite_or_inf.astype(np.float64).mean()),
            "nan_count": n_nan,
        }


def dense_transform(mask: FaultMask):
    def transform(out: np.ndarray) -> np.ndarray:
        return from_bits(apply_mask(to_bits(out), mask))

    return transform


def quantized_transform(mask: FaultMask):
    def transform(out: np.ndarray) -> np.ndarray:
        codes = quantize(DenseTensor(out), saturate=True).data.view(np.uint32)
        faulted = apply_mask(codes, mask).view(np.int32)
        return dequantize(QuantTensor(faulted)).data.copy()

    return transform


def sparse_transform(mask: FaultMask, sample_shape):
    """Per-sample COO round trip with the index array masked, vectorized over the batch."""
    sample_shape = tuple(sample_shape)
    n = math.prod(sample_shape)
    dims = np.asarray(sample_shape, dtype=np.int64)

    def transform(out: np.ndarray) -> np.ndarray:
        b = out.shape[0]
        flat_out = np.ascontiguousarray(out, dtype=np.float32).reshape(b, n)
        sample, flat = np.nonzero(flat_out.view(np.uint32))
        if not len(flat):
            return out
        counts = np.bincount(sample, minlength=b)
        starts = np.cumsum(counts) - counts
        row = np.arange(len(flat)) - starts[sample]
        coords = np.stack(np.unravel_index(flat, sample_shape), axis=1).astype(np.uint32)
        rows = FaultMask(coords.shape, mask.and_mask[row], mask.or_mask[row], mask.xor_mask[row])
        faulted = apply_mask(coords, rows).astype(np.int64) % dims
        dest = np.ravel_multi_index(faulted.T, sample_shape) + sample * n
        values = flat_out[sample, flat]
        result = np.zeros(b * n, dtype=np.float32)
        rev_unique, rev_pos = np.unique(dest[::-1], return_index=True)
        result[rev_unique] = values[len(dest) - 1 - rev_pos]
        return result.reshape(out.shape)

    return transform


class InjectionHandler:
    def __init__(self, model: Model, injections, experiment_id: str = "", seed: int | None = None):
        self.model = model
        self.faults: list[Fault | FaultArray] = [i for i in injections if isinstance(i, (Fault, FaultArray))]
        self.monitors: list[Monitor] = [i for i in injections if isinstance(i, Monitor)]
        unknown = [i for i in injections if not isinstance(i, (Fault, FaultArray, Monitor))]
        if unknown:
            raise TypeError(f"not a Fault, FaultArray or Monitor: {unknown[0]!r}")
        self.experiment_id = experiment_id
        self.seed = seed
        self.masks: dict[tuple, FaultMask] = {}
        self.backups: dict[str, np.ndarray] = {}
        self.trace = FaultTrace(seed=seed)
        self.records: list[MonitorRecord] = []
        self.armed = False
        self._hooks: list[tuple[str, object]] = []
        self._batch_start = 0
        self._compile()

    def _compile(self) -> None:
        groups: dict[tuple, list[Fault | FaultArray]] = {}
        for f in self.faults:
            groups.setdefault(f.key, []).append(f)
        for m in self.monitors:
            self.model.layer(m.layer_name)
            if m.target is TargetType.WEIGHT and not isinstance(self.model.layer(m.layer_name), PARAMETRIC):
                raise InvalidFault(f"layer {m.layer_name!r} has no weights to monitor")
        for key, faults in groups.items():
            layer, target, site = key
            shape = target_shape(self.model, layer, target, site)
            flat, bits, kinds = flatten_faults(faults, shape)
            self.masks[key] = build_mask(shape, flat, bits, kinds)
            self.trace.blocks.append(TraceBlock(layer, target, site, flat, bits, kinds))

    def arm(self) -> InjectionHandler:
        if self.armed or getattr(self.model, "_active_handler", None) is not None:
            raise DoubleArm("model already has armed injections")
        for (layer_name, target, site), mask in self.masks.items():
            layer = self.model.layer(layer_name)
            if target is TargetType.WEIGHT:
                if layer_name not in self.backups:
                    self.backups[layer_name] = layer.weight.copy()
                w = layer.weight.view(np.uint32)
                w[...] = apply_mask(w, mask)
            elif site is SiteType.DENSE_FLOAT:
                self._hook("transform", layer_name, dense_transform(mask))
            elif site is SiteType.QUANTIZED_INT:
                self._hook("transform", layer_name, quantized_transform(mask))
            else:
                self._hook("transform", layer_name, sparse_transform(mask, self.model.shapes[layer_name]))
        for mon in self.monitors:
            self._hook("observer", mon.layer_name, self._observer(mon))
        self.model._active_handler = self
        self.armed = True
        return self

    def _hook(self, kind: str, layer: str, fn) -> None:
        if kind == "transform":
            self.model.hooks.add_transform(layer, fn)
        else:
            self.model.hooks.add_observer(layer, fn)
        self._hooks.append((layer, fn))

    def _observer(self, mon: Monitor):
        layer = self.model.layer(mon.layer_name)

        def observe(out: np.ndarray) -> None:
            now = time.time()
            for i in range(out.shape[0]):
                value = layer.weight if mon.target is TargetType.WEIGHT else out[i]
                rec = MonitorRecord(self.experiment_id, mon.layer_name, mon.target, mon.capture,
                                    self._batch_start + i, now)
                if mon.capture is CaptureMode.FULL_TENSOR:
                    rec.tensor = DenseTensor(value)
                else:
                    rec.summary = _summary(value)
                self.records.append(rec)

        return observe

    def restore(self) -> None:
        if not self.armed:
            raise NotArmed("handler is not armed")
        for name, backup in self.backups.items():
            self.model.layer(name).weight[...] = backup
        self.backups.clear()
        for layer, fn in self._hooks:
            self.model.hooks.remove(layer, fn)
        self._hooks.clear()
        self.model._active_handler = None
        self.armed = False


def setup(model: Model, injections, experiment_id: str = "", seed: int | None = None) -> InjectionHandler:
    """Validate every injection, then back up, patch and hook the model.

    Nothing is modified if validation fails (unknown layer, out-of-range
    index, conflicting stuck-at bits).
    """
    try:
        return InjectionHandler(model, list(injections), experiment_id, seed).arm()
    except KeyError as e:
        if isinstance(e, UnknownLayer):
            raise
        raise UnknownLayer(str(e)) from e


def run(handler: InjectionHandler, dataset, batch_size: int = 256) -> RunResult:
    """Faulted inference over the whole dataset.

    Accuracy is computed with the same batching as :func:`nnfault.nn.accuracy`,
    so an empty injection list reproduces the baseline exactly.
    """
    if not handler.armed:
        raise NotArmed("handler is not armed")
    x, y = dataset.inputs, np.asarray(dataset.labels)
    if len(y) == 0:
        raise EmptyDataset("cannot run on an empty dataset")
    handler.records = []
    correct = 0
    with np.errstate(all="ignore"):
        for i in range(0, len(y), batch_size):
            handler._batch_start = i
            out = forward(handler.model, x[i:i + batch_size])
            correct += int(np.count_nonzero(predict(out) == y[i:i + batch_size]))
    metrics = {"accuracy": correct / len(y)}
    return RunResult(metrics, handler.records, handler.trace, len(y))


def restore(handler: InjectionHandler) -> None:
    handler.restore()


@contextmanager
def injected(model: Model, injections, experiment_id: str = "", seed: int | None = None):
    handler = setup(model, injections, experiment_id, seed)
    try:
        yield handler
    finally:
        handler.restore()

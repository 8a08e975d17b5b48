"""Deterministic synthetic datasets and desk-scale models.

All randomness comes from :mod:`nnfault.rng`, so a given seed yields the same
bytes on every platform. Nothing here downloads data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (
    LIF,
    AvgPool,
    Conv2D,
    FullyConnected,
    HookSet,
    Model,
    ReLU,
    forward,
    predict,
    train_sgd,
)
from .rng import SplitMix64, derive_seed
from .tensor import DenseTensor, save


@dataclass(eq=False)
class SyntheticDataset:
    inputs: np.ndarray  # [n, d] float32
    labels: np.ndarray  # [n] int64
    n_classes: int
    split: str = "all"
    seed: int = 0
    index: np.ndarray | None = None  # positions in the parent dataset

    @property
    def features(self) -> np.ndarray:
        return self.inputs

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str):
        idx = np.asarray(idx, dtype=np.int64)
        parent = self.index if self.index is not None else np.arange(len(self))
        return type(self)(self.inputs[idx], self.labels[idx], self.n_classes, split, self.seed, parent[idx])


@dataclass(eq=False)
class EventDataset(SyntheticDataset):
    """``inputs`` has shape ``[n, T, d]`` with entries in {0, 1}."""

    @property
    def events(self) -> np.ndarray:
        return self.inputs


def make_blobs(n: int, d: int, n_classes: int, spread: float, seed: int) -> SyntheticDataset:
    """Balanced Gaussian clusters around unit-norm random centers."""
    if n_classes < 2 or n < n_classes or d < 1 or spread < 0:
        raise ValueError(f"invalid blob parameters n={n} d={d} C={n_classes} spread={spread}")
    rng = SplitMix64(derive_seed(seed, "blobs"))
    centers = rng.normal(n_classes * d).reshape(n_classes, d)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = (np.arange(n) % n_classes)[rng.permutation(n)]
    noise = rng.normal(n * d).reshape(n, d)
    x = (centers[labels] + spread * noise).astype(np.float32)
    return SyntheticDataset(x, labels.astype(np.int64), n_classes, "all", seed)


def class_subsets(d: int, n_classes: int) -> list[range]:
    """Contiguous block of feature indices owned by each class."""
    width = d // n_classes
    return [range(c * width, (c + 1) * width) for c in range(n_classes)]


def make_events(n: int, T: int, d: int, n_classes: int, rate_per_class, seed: int,
                background: float = 0.02) -> EventDataset:
    """Class-conditional Bernoulli event streams.

    Features in the class's own block fire with probability
    ``rate_per_class[c]`` per time step; every other feature fires with
    probability ``background``.
    """
    rates = np.broadcast_to(np.asarray(rate_per_class, dtype=np.float64), (n_classes,))
    if n_classes < 2 or d < n_classes or T < 1 or n < n_classes:
        raise ValueError(f"invalid event parameters n={n} T={T} d={d} C={n_classes}")
    if np.any(rates <= 0) or np.any(rates > 1) or not 0 <= background < 1:
        raise ValueError("firing rates must lie in (0, 1] and background in [0, 1)")
    rng = SplitMix64(derive_seed(seed, "events"))
    labels = (np.arange(n) % n_classes)[rng.permutation(n)]
    p = np.full((n_classes, d), background)
    for c, block in enumerate(class_subsets(d, n_classes)):
        p[c, block.start:block.stop] = rates[c]
    u = rng.uniform(n * T * d).reshape(n, T, d)
    events = (u < p[labels][:, None, :]).astype(np.float32)
    return EventDataset(events, labels.astype(np.int64), n_classes, "all", seed)


def train_test_split(ds: SyntheticDataset, test_fraction: float = 0.3, seed: int | None = None):
    """Disjoint, exhaustive split; both halves keep the parent's row order."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(ds)
    n_test = max(1, int(round(n * test_fraction)))
    perm = SplitMix64(derive_seed(ds.seed if seed is None else seed, "split")).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx, "train"), ds.subset(test_idx, "test")


def export_dataset(ds: SyntheticDataset, path: str | Path) -> Path:
    """Write ``inputs.flt`` (tensor container) and ``labels.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save(path / "inputs.flt", DenseTensor(ds.inputs))
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["row", "label"])
        w.writerows(enumerate(ds.labels.tolist()))
    return path


# -- models -----------------------------------------------------------------


def _uniform(rng: SplitMix64, shape, fan_in: int, gain: float = 6.0) -> np.ndarray:
    bound = math.sqrt(gain / fan_in)
    return ((rng.uniform(math.prod(shape)) * 2 - 1) * bound).reshape(shape).astype(np.float32)


def _fc(rng, name, n_in, n_out, gain=6.0):
    return FullyConnected(name, _uniform(rng, (n_out, n_in), n_in, gain), np.zeros(n_out, np.float32))


def _conv(rng, name, c_in, c_out, k, stride=1, padding=0):
    w = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    return Conv2D(name, w, np.zeros(c_out, np.float32), stride, padding)


def mlp(d: int = 64, hidden=(320, 256), n_classes: int = 10, seed: int = 0) -> Model:
    """ReLU MLP; the default sizes give 104 960 weights."""
    rng = SplitMix64(derive_seed(seed, "mlp"))
    layers, n_in = [], d
    for i, h in enumerate(hidden, 1):
        layers += [_fc(rng, f"fc{i}", n_in, h), ReLU(f"relu{i}")]
        n_in = h
    layers.append(_fc(rng, f"fc{len(hidden) + 1}", n_in, n_classes, gain=3.0))
    return Model(layers, (d,))


def cnn(input_shape=(1, 8, 8), channels: int = 8, n_classes: int = 10, seed: int = 0) -> Model:
    """conv -> relu -> avgpool -> fc. Only the fc readout is trained."""
    rng = SplitMix64(derive_seed(seed, "cnn"))
    c, h, w = input_shape
    layers = [
        _conv(rng, "conv1", c, channels, 3, padding=1),
        ReLU("relu1"),
        AvgPool("pool1", 2),
        _fc(rng, "fc1", channels * (h // 2) * (w // 2), n_classes, gain=3.0),
    ]
    return Model(layers, input_shape)


def snn(input_shape=(2, 8, 8), time_steps: int = 20, channels: int = 8, n_classes: int = 4,
        seed: int = 0) -> Model:
    """Two conv+LIF stages with fixed random kernels and an fc+LIF spike readout."""
    rng = SplitMix64(derive_seed(seed, "snn"))
    c, h, w = input_shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    layers = [
        _conv(rng, "conv1", c, channels, 3, padding=1),
        LIF("lif1", decay=0.8, threshold=0.5),
        _conv(rng, "conv2", channels, channels, 3, stride=2, padding=1),
        LIF("lif2", decay=0.8, threshold=0.5),
        _fc(rng, "fc1", channels * h2 * w2, n_classes, gain=3.0),
        LIF("lif_out", decay=0.9, threshold=1.0),
    ]
    return Model(layers, input_shape, time_steps)


def spike_trains(model: Model, inputs: np.ndarray, layer: str, batch_size: int = 256) -> np.ndarray:
    """Spikes of ``layer`` as ``[n, T, ...]`` (an observer on a spiking forward)."""
    rows = []
    hooks = HookSet()
    hooks.add_observer(layer, rows.append)
    for i in range(0, len(inputs), batch_size):
        forward(model, inputs[i:i + batch_size], hooks)
    return np.concatenate(rows)


def _readout_counts(trains, weight, bias, lif: LIF) -> np.ndarray:
    n, T = trains.shape[:2]
    x = trains.reshape(n, T, -1)
    state = lif.initial_state((n, weight.shape[0]))
    counts = np.zeros((n, weight.shape[0]), dtype=np.float32)
    for t in range(T):
        s, state = lif.step(state, x[:, t] @ weight.T + bias)
        counts += s
    return counts


def train_snn_readout(model: Model, train: EventDataset, epochs: int = 60, learning_rate: float = 0.5,
                      seed: int = 0, readout: str = "fc1",
                      gains=tuple(2.0 ** k for k in range(-4, 7))) -> Model:
    """Fit the readout on hidden firing rates, then pick its gain.

    The readout is trained as softmax regression on the mean rates of the
    layer feeding it. Because the output LIF saturates at one spike per step,
    the trained weights are rescaled by the gain from ``gains`` that gives
    the best training accuracy on actual output spike counts (smallest gain
    on ties).
    """
    trained = model.clone()
    idx = trained.layer_names.index(readout)
    feeder = trained.layers[idx - 1].name
    out = trained.layers[idx + 1]
    if not isinstance(out, LIF):
        raise ValueError(f"{readout!r} must feed an LIF output layer")
    trains = spike_trains(trained, train.inputs, feeder)
    feats = trains.mean(axis=1, dtype=np.float32).reshape(len(train), -1)
    fc = trained.layers[idx]
    head = Model([FullyConnected(fc.name, fc.weight, fc.bias)], trained.shapes[feeder])
    head = train_sgd(head, SyntheticDataset(feats, train.labels, train.n_classes, "train"),
                     epochs, learning_rate, seed=seed)
    w, b = head.layers[0].weight, head.layers[0].bias
    best = None
    for g in gains:
        gw, gb = (w * np.float32(g)), (b * np.float32(g))
        acc = float(np.mean(predict(_readout_counts(trains, gw, gb, out)) == train.labels))
        if best is None or acc > best[0]:
            best = (acc, g, gw, gb)
    fc.weight, fc.bias = best[2], best[3]
    trained.meta["loss_history"] = head.meta["loss_history"]
    trained.meta["readout_gain"] = best[1]
    return trained


def build(name: str, seed: int = 0, **kw) -> Model:
    factories = {"mlp": mlp, "cnn": cnn, "snn": snn}
    if name not in factories:
        raise KeyError(f"unknown zoo model {name!r}; choose from {sorted(factories)}")
    return factories[name](seed=seed, **kw)

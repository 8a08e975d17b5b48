"""Minimal hookable float32 inference engine.

Tensors flowing between layers are plain ``float32`` numpy arrays with a
leading batch axis. Each layer may carry output *transforms* (rewrite the
output, used for fault injection) and *observers* (read-only callbacks, used
for monitors). Transforms run before observers.

Spiking models take inputs of shape ``[batch, T, *input_shape]``; every layer
is applied once per time step, LIF layers keep their membrane state across
steps, and the model output is the per-neuron spike count of the last layer
summed over time. Observers of a spiking model receive the time-stacked
output ``[batch, T, ...]`` once per forward call.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import EmptyDataset, NonDifferentiableLayer, ShapeMismatch, UnknownLayer
from .rng import SplitMix64

Transform = Callable[[np.ndarray], np.ndarray]
Observer = Callable[[np.ndarray], None]


# -- layers -----------------------------------------------------------------


@dataclass(eq=False)
class FullyConnected:
    name: str
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    kind = "fc"

    def __post_init__(self):
        # private writable copies: the injector patches weights in place
        self.weight = np.array(self.weight, dtype=np.float32, order="C")
        self.bias = np.array(self.bias, dtype=np.float32, order="C")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(f"{self.name}: weight {self.weight.shape} / bias {self.bias.shape}")

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.weight.shape[1]:
            raise ShapeMismatch(f"{self.name}: expects {self.weight.shape[1]} inputs, got {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ self.weight.T + self.bias


@dataclass(eq=False)
class Conv2D:
    name: str
    weight: np.ndarray  # [out_ch, in_ch, kh, kw]
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def __post_init__(self):
        # private writable copies: the injector patches weights in place
        self.weight = np.array(self.weight, dtype=np.float32, order="C")
        self.bias = np.array(self.bias, dtype=np.float32, order="C")
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(f"{self.name}: weight {self.weight.shape} / bias {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"{self.name}: bad stride/padding {self.stride}/{self.padding}")

    def output_shape(self, in_shape):
        oc, ic, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != ic:
            raise ShapeMismatch(f"{self.name}: expects [{ic}, H, W], got {in_shape}")
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeMismatch(f"{self.name}: kernel larger than input {in_shape}")
        return (oc, h, w)

    def forward(self, x):
        oc, ic, kh, kw = self.weight.shape
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        b, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, ic * kh * kw)
        out = cols @ self.weight.reshape(oc, -1).T + self.bias
        return np.ascontiguousarray(out.reshape(b, ho, wo, oc).transpose(0, 3, 1, 2))


@dataclass(eq=False)
class ReLU:
    name: str
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, np.float32(0))


@dataclass(eq=False)
class AvgPool:
    name: str
    window: int = 2
    kind = "avgpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < self.window or in_shape[2] < self.window:
            raise ShapeMismatch(f"{self.name}: cannot pool {in_shape} with window {self.window}")
        return (in_shape[0], in_shape[1] // self.window, in_shape[2] // self.window)

    def forward(self, x):
        w = self.window
        b, c, h, wd = x.shape
        x = x[:, :, : h - h % w, : wd - wd % w]
        return x.reshape(b, c, h // w, w, wd // w, w).mean(axis=(3, 5), dtype=np.float32)


@dataclass
class LIFState:
    v: np.ndarray
    t: int = 0


@dataclass(eq=False)
class LIF:
    """Leaky integrate-and-fire: ``v <- decay*v + I``; spike when ``v >= threshold``; soft reset."""

    name: str
    decay: float = 0.9
    threshold: float = 1.0
    kind = "lif"

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"{self.name}: decay must lie in [0, 1), got {self.decay}")
        if not self.threshold > 0.0:
            raise ValueError(f"{self.name}: threshold must be positive, got {self.threshold}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def initial_state(self, shape) -> LIFState:
        return LIFState(np.zeros(shape, dtype=np.float32))

    def step(self, state: LIFState, current):
        return lif_step(state, current, self.decay, self.threshold)


Layer = Union[FullyConnected, Conv2D, ReLU, AvgPool, LIF]
PARAMETRIC = (FullyConnected, Conv2D)


def lif_step(state: LIFState, current, decay: float, threshold: float):
    """One discrete LIF update; returns ``(spikes, new_state)``."""
    a = np.float32(decay)
    th = np.float32(threshold)
    v = a * state.v + np.asarray(current, dtype=np.float32)
    spikes = (v >= th).astype(np.float32)
    v = v - th * spikes
    return spikes, LIFState(v, state.t + 1)


# -- hooks --------------------------------------------------------------------


@dataclass
class HookSet:
    transforms: dict[str, list[Transform]] = field(default_factory=dict)
    observers: dict[str, list[Observer]] = field(default_factory=dict)

    def add_transform(self, layer: str, fn: Transform) -> Transform:
        self.transforms.setdefault(layer, []).append(fn)
        return fn

    def add_observer(self, layer: str, fn: Observer) -> Observer:
        self.observers.setdefault(layer, []).append(fn)
        return fn

    def remove(self, layer: str, fn) -> None:
        for table in (self.transforms, self.observers):
            fns = table.get(layer, [])
            if fn in fns:
                fns.remove(fn)
                if not fns:
                    del table[layer]
                return
        raise KeyError(f"hook not registered on {layer!r}")

    def clear(self) -> None:
        self.transforms.clear()
        self.observers.clear()

    def __bool__(self) -> bool:
        return bool(self.transforms or self.observers)


# -- model ------------------------------------------------------------------


@dataclass(eq=False)
class Model:
    layers: list
    input_shape: tuple[int, ...]
    time_steps: int | None = None
    hooks: HookSet = field(default_factory=HookSet)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        if self.is_spiking and not self.time_steps:
            raise ValueError("spiking models need time_steps")
        self.shapes = self._infer_shapes()

    @property
    def is_spiking(self) -> bool:
        return any(isinstance(l, LIF) for l in self.layers)

    def _infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        s = self.input_shape
        for layer in self.layers:
            s = tuple(layer.output_shape(s))
            shapes[layer.name] = s
        return shapes

    def layer(self, name: str):
        for l in self.layers:
            if l.name == name:
                return l
        raise UnknownLayer(f"no layer named {name!r}")

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[self.layers[-1].name]

    def parametric_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, PARAMETRIC)]

    def n_weights(self) -> int:
        return sum(l.weight.size for l in self.parametric_layers())

    def clone(self) -> Model:
        """Deep copy of layers and metadata; hooks are not carried over."""
        return Model(copy.deepcopy(self.layers), self.input_shape, self.time_steps,
                     HookSet(), copy.deepcopy(self.meta))


def _as_batch(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    per = model.input_shape if not model.is_spiking else (model.time_steps, *model.input_shape)
    n = math.prod(per)
    if x.ndim == 0 or x.size % n or x.shape[0] * n != x.size:
        raise ShapeMismatch(f"input of shape {x.shape} does not match per-sample shape {per}")
    return x.reshape(x.shape[0], *per)


def _post(hooks: HookSet, name: str, out: np.ndarray) -> np.ndarray:
    for fn in hooks.transforms.get(name, ()):
        out = fn(out)
    return out


def forward(model: Model, x, hooks: HookSet | None = None) -> np.ndarray:
    hooks = model.hooks if hooks is None else hooks
    x = _as_batch(model, x)
    if not model.is_spiking:
        h = x
        for layer in model.layers:
            h = _post(hooks, layer.name, layer.forward(h))
            for fn in hooks.observers.get(layer.name, ()):
                fn(h)
        return h

    b = x.shape[0]
    states = {l.name: l.initial_state((b, *model.shapes[l.name]))
              for l in model.layers if isinstance(l, LIF)}
    trace = {name: [] for name in hooks.observers if name in model.shapes}
    counts = np.zeros((b, *model.output_shape), dtype=np.float32)
    for t in range(model.time_steps):
        h = x[:, t]
        for layer in model.layers:
            if isinstance(layer, LIF):
                h, states[layer.name] = layer.step(states[layer.name], h)
            else:
                h = layer.forward(h)
            h = _post(hooks, layer.name, h)
            if layer.name in trace:
                trace[layer.name].append(h)
        counts += h
    for name, steps in trace.items():
        stacked = np.stack(steps, axis=1)
        for fn in hooks.observers[name]:
            fn(stacked)
    return counts


def predict(outputs: np.ndarray) -> np.ndarray:
    """Argmax with NaN treated as -inf and ties broken toward the lowest index."""
    o = np.where(np.isnan(outputs), -np.inf, outputs)
    return np.argmax(o.reshape(o.shape[0], -1), axis=1)


def accuracy(model: Model, dataset, hooks: HookSet | None = None, batch_size: int = 256) -> float:
    x, y = dataset.inputs, np.asarray(dataset.labels)
    if len(y) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    correct = 0
    for i in range(0, len(y), batch_size):
        out = forward(model, x[i:i + batch_size], hooks)
        correct += int(np.count_nonzero(predict(out) == y[i:i + batch_size]))
    return correct / len(y)


# -- training (dense heads only) -------------------------------------------------


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), labels] + 1e-30).mean())
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def _split_trainable(model: Model, trainable):
    if model.is_spiking:
        raise NonDifferentiableLayer("LIF layers have no gradient; train a dense readout instead")
    names = [l.name for l in model.layers if isinstance(l, FullyConnected)]
    trainable = set(names if trainable is None else trainable)
    idx = [i for i, l in enumerate(model.layers) if l.name in trainable]
    if not idx:
        raise ValueError("no trainable layers")
    first = idx[0]
    for l in model.layers[first:]:
        if not isinstance(l, (FullyConnected, ReLU)):
            raise NonDifferentiableLayer(f"cannot backpropagate through {l.kind} layer {l.name!r}")
        if l.name in trainable and not isinstance(l, FullyConnected):
            raise NonDifferentiableLayer(f"{l.name!r} has no weights to train")
    return model.layers[:first], model.layers[first:], trainable


def loss_and_grads(layers, feats, labels, dtype=np.float32):
    """Cross-entropy loss and gradients for a stack of FC/ReLU layers.

    Returns ``(loss, {layer_name: (dW, db)})``.
    """
    acts = [np.asarray(feats, dtype=dtype).reshape(len(labels), -1)]
    for l in layers:
        h = acts[-1]
        if isinstance(l, FullyConnected):
            acts.append(h @ l.weight.astype(dtype).T + l.bias.astype(dtype))
        else:
            acts.append(np.maximum(h, 0))
    loss, d = _softmax_xent(acts[-1], np.asarray(labels))
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        l, h_in = layers[i], acts[i]
        if isinstance(l, FullyConnected):
            grads[l.name] = (d.T @ h_in, d.sum(axis=0))
            d = d @ l.weight.astype(dtype)
        else:
            d = d * (h_in > 0)
    return loss, grads


def train_sgd(model: Model, dataset, epochs: int, learning_rate: float,
              batch_size: int = 32, seed: int = 0, trainable=None,
              weight_decay: float = 0.0) -> Model:
    """Minibatch SGD on softmax cross-entropy; returns a trained copy.

    Layers ahead of the first trainable FC layer act as frozen feature
    extractors, which is how the conv and spiking zoo models get their readouts.
    ``meta["loss_history"]`` holds the mean training loss of each epoch.
    """
    trained = model.clone()
    frozen, head, names = _split_trainable(trained, trainable)
    x = _as_batch(trained, dataset.inputs)
    y = np.asarray(dataset.labels)
    if len(y) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    feats = x
    for l in frozen:
        feats = l.forward(feats)
    rng = SplitMix64(seed)
    lr = np.float32(learning_rate)
    wd = np.float32(weight_decay)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for i in range(0, len(y), batch_size):
            sel = order[i:i + batch_size]
            loss, grads = loss_and_grads(head, feats[sel], y[sel])
            losses.append(loss * len(sel))
            for l in head:
                if l.name in names:
                    dw, db = grads[l.name]
                    if wd:
                        dw = dw + wd * l.weight
                    l.weight = l.weight - lr * dw.astype(np.float32)
                    l.bias = l.bias - lr * db.astype(np.float32)
        history.append(sum(losses) / len(y))
    trained.meta["loss_history"] = history
    return trained

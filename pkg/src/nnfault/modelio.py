"""Model directories: ``manifest.json`` plus one ``.flt`` tensor container per array.

The manifest lists layers in order with their kind, hyperparameters and the
file names of their weight and bias blobs. It is written with sorted keys, so
saving the same model twice gives byte-identical directories.
"""

from __future__ import annotations

import json
from pathlib import Path

from .nn import LIF, AvgPool, Conv2D, FullyConnected, Model, ReLU
from .tensor import DenseTensor, load, save

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

_PARAMS = {
    "fc": (FullyConnected, ()),
    "conv2d": (Conv2D, ("stride", "padding")),
    "relu": (ReLU, ()),
    "avgpool": (AvgPool, ("window",)),
    "lif": (LIF, ("decay", "threshold")),
}


def save_model(path: str | Path, model: Model) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in model.layers:
        _, fields = _PARAMS[layer.kind]
        entry = {"name": layer.name, "kind": layer.kind}
        entry.update({f: getattr(layer, f) for f in fields})
        if hasattr(layer, "weight"):
            for part in ("weight", "bias"):
                fname = f"{layer.name}.{part}.flt"
                save(path / fname, DenseTensor(getattr(layer, part)))
                entry[part] = fname
        layers.append(entry)
    manifest = {
        "format": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "time_steps": model.time_steps,
        "layers": layers,
        "meta": model.meta,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_model(path: str | Path) -> Model:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {manifest.get('format')!r}")
    layers = []
    for entry in manifest["layers"]:
        cls, fields = _PARAMS[entry["kind"]]
        kw = {f: entry[f] for f in fields}
        if "weight" in entry:
            kw.update(weight=load(path / entry["weight"]).data, bias=load(path / entry["bias"]).data)
        layers.append(cls(entry["name"], **kw))
    return Model(layers, tuple(manifest["input_shape"]), manifest["time_steps"], meta=manifest["meta"])

from __future__ import annotations

import csv

import numpy as np
import pytest

from nnfault import zoo
from nnfault.nn import accuracy
from nnfault.tensor import load

from conftest import trained_snn


def test_blobs_spread_zero_is_centers():
    ds = zoo.make_blobs(50, 8, 5, 0.0, 2)
    x = ds.inputs.astype(np.float64)
    # 1-NN against the other points: identical class points are at distance 0
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert np.mean(ds.labels[d.argmin(axis=1)] == ds.labels) == 1.0
    assert np.allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-6)


def test_blobs_deterministic_and_balanced():
    a = zoo.make_blobs(100, 16, 4, 0.3, 9)
    b = zoo.make_blobs(100, 16, 4, 0.3, 9)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [25] * 4
    assert a.inputs.tobytes() != zoo.make_blobs(100, 16, 4, 0.3, 10).inputs.tobytes()


def test_blobs_invalid():
    with pytest.raises(ValueError):
        zoo.make_blobs(10, 4, 1, 0.1, 0)


def test_mlp_baseline(mlp_bundle):
    model, _, test = mlp_bundle
    assert model.n_weights() == 104_960
    assert accuracy(model, test) >= 0.90


def test_events_rate_one_fires_every_step():
    ds = zoo.make_events(40, 10, 16, 2, [1.0, 0.5], 3, background=0.0)
    block = zoo.class_subsets(16, 2)[0]
    cls0 = ds.events[ds.labels == 0]
    assert (cls0[:, :, block.start:block.stop] == 1).all()
    assert set(np.unique(ds.events).tolist()) <= {0.0, 1.0}


def test_events_deterministic_and_invalid():
    a = zoo.make_events(20, 5, 8, 2, 0.4, 1)
    b = zoo.make_events(20, 5, 8, 2, 0.4, 1)
    assert a.events.tobytes() == b.events.tobytes()
    with pytest.raises(ValueError):
        zoo.make_events(20, 5, 8, 2, 0.0, 1)


def test_split_disjoint_and_exhaustive():
    ds = zoo.make_blobs(101, 4, 3, 0.2, 0)
    tr, te = zoo.train_test_split(ds, 0.3, 4)
    assert set(tr.index.tolist()).isdisjoint(te.index.tolist())
    assert sorted(tr.index.tolist() + te.index.tolist()) == list(range(101))
    assert tr.split == "train" and te.split == "test"
    assert np.array_equal(te.inputs, ds.inputs[te.index])


def test_snn_readout_baseline(snn_bundle):
    model, _, test = snn_bundle
    assert model.is_spiking
    assert accuracy(model, test) >= 0.85


def test_snn_readout_deterministic(snn_bundle):
    model, _, _ = snn_bundle
    again, _, _ = trained_snn()
    assert model.layer("fc1").weight.tobytes() == again.layer("fc1").weight.tobytes()


def test_cnn_trains_readout():
    ds = zoo.make_blobs(600, 64, 4, 0.3, 2)
    tr, te = zoo.train_test_split(ds, 0.3, 2)
    from nnfault.nn import train_sgd
    m = zoo.cnn(n_classes=4, seed=2)
    conv = m.layer("conv1").weight.copy()
    t = train_sgd(m, tr, 30, 0.5, seed=2)
    assert np.array_equal(t.layer("conv1").weight, conv)
    assert accuracy(t, te) >= 0.8


def test_export_dataset(tmp_path):
    ds = zoo.make_blobs(12, 3, 3, 0.2, 0)
    zoo.export_dataset(ds, tmp_path)
    assert load(tmp_path / "inputs.flt").bit_equal(load(tmp_path / "inputs.flt"))
    assert load(tmp_path / "inputs.flt").data.tobytes() == ds.inputs.tobytes()
    with open(tmp_path / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "label"]
    assert [int(r[1]) for r in rows[1:]] == ds.labels.tolist()


def test_build_unknown():
    with pytest.raises(KeyError):
        zoo.build("resnet")

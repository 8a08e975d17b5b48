from __future__ import annotations

import pytest

from nnfault import nn, zoo

MLP_SEED = 7
SNN_SEED = 7


def blob_splits(seed: int = MLP_SEED):
    return zoo.train_test_split(zoo.make_blobs(1000, 64, 10, 0.3, seed), 0.3, seed)


def trained_mlp(seed: int = MLP_SEED):
    train, test = blob_splits(seed)
    model = nn.train_sgd(zoo.mlp(seed=seed), train, 30, 0.05, weight_decay=0.03, seed=seed)
    return model, train, test


def event_splits(n: int = 600, seed: int = SNN_SEED):
    ds = zoo.make_events(n, 20, 128, 4, 0.15, seed, background=0.05)
    return zoo.train_test_split(ds, 0.3, seed)


def trained_snn(n: int = 600, seed: int = SNN_SEED):
    train, test = event_splits(n, seed)
    return zoo.train_snn_readout(zoo.snn(seed=seed), train, seed=seed), train, test


@pytest.fixture(scope="session")
def mlp_bundle():
    return trained_mlp()


@pytest.fixture(scope="session")
def snn_bundle():
    return trained_snn()


@pytest.fixture
def mlp(mlp_bundle):
    """A private copy, so tests that patch weights cannot leak into each other."""
    model, train, test = mlp_bundle
    return model.clone(), train, test

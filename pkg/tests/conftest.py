import numpy as np
import pytest
from hypothesis import settings

from japan import data as dt
from japan import flow as nf
from japan.numcore import Rng

settings.register_profile("japan", deadline=None, max_examples=50)
settings.load_profile("japan")


def _trained(dataset, seed=0, config=None):
    ds = dt.split(dataset, seed=seed)
    x_tr, y_tr = ds.part("train")
    cfg = config or nf.TrainConfig(seed=seed)
    model = nf.train_nll(y_tr, x_tr if ds.c else None, cfg, Rng(seed, stream="train"))
    return ds, model


@pytest.fixture(scope="session")
def moons():
    """Default moons split (seed 0) with a flow trained at default settings."""
    return _trained(dt.generate_toy(dt.ToySpec("moons")))


@pytest.fixture(scope="session")
def circles():
    return _trained(dt.generate_toy(dt.ToySpec("circles")))


@pytest.fixture(scope="session")
def conditional():
    return _trained(dt.generate_conditional(10_000, seed=0))


@pytest.fixture
def rng():
    return Rng(1234, stream="tests")


def random_model(d, c=0, seed=3, n_layers=4, hidden=16, scale=1.0):
    """Untrained flow with non-trivial weights, for numeric checks."""
    model = nf.FlowModel.create(d, c, n_layers, hidden, Rng(seed, stream="model"))
    noise = Rng(seed, stream="theta").normal(model.n_params)
    return model.with_theta(model.theta + scale * 0.1 * noise)

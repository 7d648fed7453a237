import numpy as np
import pytest

from grayvfm import data
from grayvfm.physics import FluidState, PhysicalConstants


def random_states(rng, n, choked=None, x_tp=0.5):
    """Feasible fluid states; ``choked`` forces x_P above/below x_TP."""
    p1 = rng.uniform(50.0, 150.0, n)
    if choked is None:
        x = rng.uniform(0.02, 0.9, n)
    elif choked:
        x = rng.uniform(x_tp + 0.01, 0.95, n)
    else:
        x = rng.uniform(0.02, x_tp - 0.01, n)
    p2 = p1 * (1.0 - x)
    T1 = rng.uniform(320.0, 380.0, n)
    z = rng.uniform(0.1, 1.0, n)
    w_g = rng.uniform(0.02, 0.15, n)
    w_o = rng.uniform(0.3, 0.8, n) * (1.0 - w_g)
    return FluidState(p1, p2, T1, z, w_g, w_o)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_well():
    """A short synthetic well, preprocessed; shared by model and training tests."""
    spec = data.SynthSpec(n_points=160, days=160.0)
    series, truth = data.synth_generate(spec, 7)
    ds, _ = data.preprocess(series, spec.constants)
    return spec, ds, truth


@pytest.fixture
def constants():
    return PhysicalConstants()

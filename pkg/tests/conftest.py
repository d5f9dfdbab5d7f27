from importlib.resources import files

import numpy as np
import pytest

from weakgas.configuration import QuadratureGrid
from weakgas.model import ChargeLaw, CutoffFunction, EnergyDensity, Kernel, ModelSpec

RADEMACHER = ChargeLaw(((1.0, 0.5), (-1.0, 0.5)))


def make_model(energy="logcosh_gauged", z=1.0, plateau=2.0, ramp=0.5, law=RADEMACHER, kernel=None, **ekw):
    energy = energy if isinstance(energy, EnergyDensity) else EnergyDensity(energy, **ekw)
    kernel = kernel or Kernel("tent", (1.0, 1.0))
    return ModelSpec(1, kernel, law, energy, z, CutoffFunction(plateau, ramp, 1.0, 1.0),
                     allow_nonconcave=not energy.is_concave)


def config_path(name):
    return files("weakgas") / "configs" / name


@pytest.fixture
def model():
    return make_model()


@pytest.fixture
def grid(model):
    return QuadratureGrid.for_model(model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

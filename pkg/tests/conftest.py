"""Shared fixtures: seeded generators and tiny networks."""

import numpy as np
import pytest

from msdlab.diffusion import Denoiser, NoiseSchedule
from msdlab.distill import Generator
from msdlab.nn_core import Mlp

# Relative / absolute tolerances for backprop vs central differences
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-8


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def schedule() -> NoiseSchedule:
    return NoiseSchedule()


def make_denoiser(seed: int = 0, num_classes: int = 3, hidden: list[int] | None = None) -> Denoiser:
    return Denoiser.init(num_classes, [8, 8] if hidden is None else hidden, np.random.default_rng(seed))


def identity_generator(num_classes: int) -> Generator:
    """Single linear layer passing z straight through."""
    net = Mlp.zeros([2 + num_classes, 2])
    net.weights[0][:, :2] = np.eye(2)
    return Generator(net, num_classes)


@pytest.fixture
def denoiser() -> Denoiser:
    return make_denoiser()


def assert_grads_close(analytic, numeric) -> None:
    np.testing.assert_allclose(analytic.flatten(), numeric.flatten(), rtol=GRAD_RTOL, atol=GRAD_ATOL)

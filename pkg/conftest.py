import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.inducing import InducingSet, KernelParams
from src.core.network import Activation, Linear, NetworkSpec, SoftmaxHead, Task


def random_mlp(rng, widths, tag="tanh", gapa=True, classifier=True):
    """Linear/Activation stack over `widths`; every activation is a GAPA point when `gapa`."""
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Linear(rng.normal(0, 1 / np.sqrt(w_in), (w_out, w_in)), rng.normal(0, 0.1, w_out)))
        if i < len(widths) - 2:
            layers.append(Activation(tag))
    if classifier:
        layers.append(SoftmaxHead())
    net = NetworkSpec(tuple(layers), task=Task.CLASSIFICATION if classifier else Task.REGRESSION)
    if gapa:
        net = net.with_gapa_points(net.activation_indices())
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp_factory():
    return random_mlp


@pytest.fixture
def small_inducing(rng):
    """12 inducing rows in 3-D with unit signal variance."""
    Z = rng.normal(size=(12, 3))
    return InducingSet(1, Z, KernelParams(1.5, np.ones(3), 1e-6))

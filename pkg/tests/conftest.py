import numpy as np
import pytest

from tcx import nn
from tcx.gating import GateMatrix


def random_gate_matrix(rng, n=None, d=None, layer_id=0, kind="relu"):
    n = n or int(rng.integers(2, 64))
    d = d or int(rng.integers(1, 16))
    density = rng.uniform(0.1, 0.9)
    bits = rng.random((n, d)) < density
    return GateMatrix.from_dense(layer_id, bits, kind)


def small_relu_net(rng_seed, widths=(6, 12, 10, 8, 4)):
    return nn.init_network(nn.stacked_mlp_spec(list(widths)), rng_seed)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

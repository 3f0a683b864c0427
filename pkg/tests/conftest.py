import hypothesis
import numpy as np
import pytest

from tenshom.quadrature import DimTag, Interval1D, TensorGrid, build_gauss_rule
from tenshom.separable import FactorTable, SeparableFunction

hypothesis.settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis.settings.load_profile("ci")


def make_grid(spans, n_sub=2, n_pts=6):
    """Ad-hoc grid: spans is a list of (lo, hi, scale_tag)."""
    rules = []
    tags = []
    axis_counter = {}
    for lo, hi, scale in spans:
        rules.append(build_gauss_rule(Interval1D(lo, hi), n_sub, n_pts))
        axis = axis_counter.get(scale, 0)
        axis_counter[scale] = axis + 1
        tags.append(DimTag(scale, axis))
    return TensorGrid(tuple(rules), tuple(tags))


def random_separable(grid, dims, rank, rng, with_d1=True, with_d2=False, smooth=True):
    """Random smooth separable function with consistent derivative tables."""
    factors = {}
    for dim in dims:
        nodes = grid.nodes(dim)
        amp = rng.uniform(0.3, 1.0, size=(rank, 1))
        om = rng.uniform(0.5, 2.5, size=(rank, 1))
        ph = rng.uniform(0, 2 * np.pi, size=(rank, 1))
        values = amp * np.sin(om * nodes[None, :] + ph) + rng.uniform(0.5, 1.5, size=(rank, 1))
        d1 = amp * om * np.cos(om * nodes[None, :] + ph) if with_d1 else None
        d2 = -amp * om * om * np.sin(om * nodes[None, :] + ph) if with_d2 else None
        factors[dim] = FactorTable(dim, values, d1, d2)
    coeffs = rng.uniform(-1, 1, size=rank)
    return SeparableFunction(grid, coeffs, factors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

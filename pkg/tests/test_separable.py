import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_grid, random_separable
from tenshom import diffengine as de
from tenshom.errors import RankGuardError
from tenshom.separable import (
    FactorTable,
    SeparableFunction,
    broadcast_to_dims,
    collapse_univariate,
    combine,
    dense_eval_oracle,
    dense_l2_inner,
    derivative,
    drop_null_terms,
    l2_inner,
    l2_norm,
    multiply,
    partial_integrate,
    tabulate_terms,
)


def monomial_xy(grid):
    x, y = grid.nodes(0), grid.nodes(1)
    return SeparableFunction(grid, np.array([1.0]), {
        0: FactorTable(0, x[None, :], np.ones((1, x.size))),
        1: FactorTable(1, y[None, :], np.ones((1, y.size))),
    })


def test_inner_separable_monomial():
    grid = make_grid([(0, 1, 0), (0, 1, 1)], n_sub=2, n_pts=8)
    f = monomial_xy(grid)
    assert l2_inner(f, f) == pytest.approx(1.0 / 9.0, abs=1e-14)


def test_inner_full_period_sine_against_one():
    grid = make_grid([(0, 1, 1)], n_sub=4, n_pts=10)
    y = grid.nodes(0)
    f = SeparableFunction(grid, np.array([1.0]),
                          {0: FactorTable(0, np.sin(2 * np.pi * y)[None, :])})
    one = SeparableFunction(grid, np.array([1.0]),
                            {0: FactorTable(0, np.ones((1, y.size)))})
    assert abs(l2_inner(f, one)) <= 1e-13


def test_inner_matches_dense_oracle(rng):
    grid = make_grid([(0, 1, 0), (0, 1, 0), (0, 1, 1)], n_sub=2, n_pts=6)
    f = random_separable(grid, (0, 1, 2), 3, rng)
    g = random_separable(grid, (0, 1, 2), 2, rng)
    got = l2_inner(f, g)
    want = dense_l2_inner(f, g)
    assert abs(got - want) <= 1e-12 * (1 + abs(want))


def test_combine_cancellation_and_bilinearity(rng):
    grid = make_grid([(0, np.pi, 0), (0, 1, 1)])
    f = random_separable(grid, (0, 1), 2, rng)
    g = random_separable(grid, (0, 1), 3, rng)
    zero = combine([(1.0, f), (-1.0, f)])
    assert l2_inner(zero, zero) <= 1e-12 * l2_inner(f, f)
    doubled = combine([(2.0, f)])
    assert l2_inner(doubled, g) == pytest.approx(2 * l2_inner(f, g), rel=1e-13)
    mix = combine([(0.7, f), (-1.3, g)])
    want = dense_l2_inner(mix, mix)
    assert abs(l2_inner(mix, mix) - want) <= 1e-12 * (1 + abs(want))


def test_multiply_disjoint_dims_integrates_to_zero():
    grid = make_grid([(0, np.pi, 0), (0, 1, 1)], n_sub=4, n_pts=10)
    x, y = grid.nodes(0), grid.nodes(1)
    f = SeparableFunction(grid, np.array([1.0]), {0: FactorTable(0, np.sin(x)[None, :])})
    g = SeparableFunction(grid, np.array([1.0]),
                          {1: FactorTable(1, np.sin(2 * np.pi * y)[None, :])})
    prod = multiply(f, g)
    assert prod.rank == 1 and prod.dims == (0, 1)
    one = broadcast_to_dims(
        SeparableFunction(grid, np.array([1.0]), {0: FactorTable(0, np.ones((1, x.size)))}),
        (0, 1),
    )
    assert abs(l2_inner(prod, one)) <= 1e-13


def test_multiply_identity_and_dense_pointwise(rng):
    grid = make_grid([(0, 1, 0), (0, 1, 1)])
    f = random_separable(grid, (0, 1), 2, rng)
    one = SeparableFunction(grid, np.array([1.0]), {
        0: FactorTable(0, np.ones((1, grid.nodes(0).size))),
        1: FactorTable(1, np.ones((1, grid.nodes(1).size))),
    })
    same = multiply(one, f)
    assert abs(l2_inner(same, same) - l2_inner(f, f)) <= 1e-15 * abs(l2_inner(f, f))
    g = random_separable(grid, (0, 1), 2, rng)
    prod = multiply(f, g)
    dense = dense_eval_oracle(f) * dense_eval_oracle(g)
    assert np.abs(dense_eval_oracle(prod) - dense).max() <= 1e-13 * (1 + np.abs(dense).max())


def test_multiply_product_rule_derivatives(rng):
    grid = make_grid([(0, 1, 1)], n_sub=3, n_pts=8)
    f = random_separable(grid, (0,), 2, rng, with_d1=True, with_d2=True)
    g = random_separable(grid, (0,), 2, rng, with_d1=True, with_d2=True)
    prod = multiply(f, g)
    t = prod.factors[0]
    vf, vg = f.factors[0].values, g.factors[0].values
    df, dg = f.factors[0].d1, g.factors[0].d1
    want = (df[:, None, :] * vg[None, :, :] + vf[:, None, :] * dg[None, :, :]).reshape(4, -1)
    assert np.abs(t.d1 - want).max() <= 1e-14


def test_partial_integrate_examples(rng):
    grid = make_grid([(0, np.pi, 0), (0, 1, 1)], n_sub=4, n_pts=10)
    x, y = grid.nodes(0), grid.nodes(1)
    f = SeparableFunction(grid, np.array([1.0]), {
        0: FactorTable(0, (np.sin(x) + 2)[None, :]),
        1: FactorTable(1, np.sin(2 * np.pi * y)[None, :]),
    })
    out = partial_integrate(f, (1,))
    assert out.dims == (0,)
    assert np.abs(out.coeffs).max() <= 1e-13

    ones = SeparableFunction(grid, np.array([1.0]), {
        0: FactorTable(0, np.ones((1, x.size))),
        1: FactorTable(1, np.ones((1, y.size))),
    })
    const = partial_integrate(ones, (1,))
    assert dense_eval_oracle(const) == pytest.approx(np.ones(x.size), abs=1e-14)


def test_partial_integrate_matches_dense_slices(rng):
    grid = make_grid([(0, np.pi, 0), (0, 1, 1), (0, 1, 2)], n_sub=2, n_pts=6)
    f = random_separable(grid, (0, 1, 2), 3, rng)
    out = partial_integrate(f, (1, 2))
    dense = dense_eval_oracle(f)
    w1, w2 = grid.weights(1), grid.weights(2)
    want = np.einsum("abc,b,c->a", dense, w1, w2)
    assert np.abs(dense_eval_oracle(out) - want).max() <= 1e-12 * (1 + np.abs(want).max())


def test_integrate_out_everything_gives_scalar(rng):
    grid = make_grid([(0, 1, 1)])
    f = random_separable(grid, (0,), 2, rng)
    s = partial_integrate(f, (0,))
    assert s.dims == ()
    want = float((dense_eval_oracle(f) * grid.weights(0)).sum())
    assert float(np.sum(s.coeffs)) == pytest.approx(want, rel=1e-13)


def test_dense_oracle_guard():
    grid = make_grid([(0, 1, 0)] * 4, n_sub=8, n_pts=8)
    f = SeparableFunction(grid, np.ones(1), {
        d: FactorTable(d, np.ones((1, 64))) for d in range(4)
    })
    with pytest.raises(ValueError):
        dense_eval_oracle(f)


def test_dense_oracle_outer_product():
    grid = make_grid([(0, 1, 0), (0, 1, 0)], n_sub=1, n_pts=3)
    f = monomial_xy(grid)
    dense = dense_eval_oracle(f)
    assert np.allclose(dense, np.outer(grid.nodes(0), grid.nodes(1)), atol=1e-15)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2 ** 31 - 1))
def test_bilinearity_property(a, b, seed):
    rng = np.random.default_rng(seed)
    grid = make_grid([(0, 1, 0), (0, 1, 1)], n_sub=1, n_pts=5)
    f = random_separable(grid, (0, 1), 2, rng)
    g = random_separable(grid, (0, 1), 1, rng)
    h = random_separable(grid, (0, 1), 2, rng)
    lhs = l2_inner(combine([(a, f), (b, g)]), h)
    rhs = a * l2_inner(f, h) + b * l2_inner(g, h)
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(rhs))


def test_grid_and_dim_mismatch_errors(rng):
    g1 = make_grid([(0, 1, 0), (0, 1, 1)])
    g2 = make_grid([(0, 1, 0), (0, 1, 1)])
    f = random_separable(g1, (0, 1), 1, rng)
    g = random_separable(g2, (0, 1), 1, rng)
    with pytest.raises(ValueError):
        l2_inner(f, g)
    h = random_separable(g1, (0,), 1, rng)
    with pytest.raises(ValueError):
        l2_inner(f, h)
    with pytest.raises(ValueError):
        combine([(1.0, f), (1.0, h)])


def test_rank_guard(rng):
    grid = make_grid([(0, 1, 0)])
    f = random_separable(grid, (0,), 80, rng)
    with pytest.raises(RankGuardError):
        multiply(f, random_separable(grid, (0,), 80, rng))


def test_derivative_substitution_and_errors(rng):
    grid = make_grid([(0, 1, 1)])
    f = random_separable(grid, (0,), 2, rng, with_d1=True, with_d2=True)
    d1 = derivative(f, 0, 1)
    assert np.shares_memory(d1.factors[0].values, f.factors[0].d1)
    d2 = derivative(f, 0, 2)
    assert np.shares_memory(d2.factors[0].values, f.factors[0].d2)
    with pytest.raises(ValueError):
        derivative(d2, 0, 1)
    with pytest.raises(ValueError):
        derivative(f, 5, 1)


def test_drop_null_terms(rng):
    grid = make_grid([(0, 1, 0)])
    n = grid.nodes(0).size
    values = np.vstack([np.ones(n), np.zeros(n), np.ones(n)])
    f = SeparableFunction(grid, np.array([1.0, 5.0, 0.0]),
                          {0: FactorTable(0, values, np.zeros((3, n)))})
    out = drop_null_terms(f)
    assert out.rank == 1
    assert l2_inner(out, out) == pytest.approx(l2_inner(f, f), rel=1e-14)


def test_collapse_univariate_exact(rng):
    grid = make_grid([(0, 1, 0)])
    f = random_separable(grid, (0,), 4, rng, with_d1=True)
    c = collapse_univariate(f)
    assert c.rank == 1
    assert np.abs(dense_eval_oracle(c) - dense_eval_oracle(f)).max() <= 1e-14
    assert abs(l2_inner(c, c) - l2_inner(f, f)) <= 1e-13 * abs(l2_inner(f, f))


def test_domain_measure_padding():
    grid = make_grid([(0, 2, 0), (0, 1, 1)])
    y = grid.nodes(1)
    f = SeparableFunction(grid, np.array([1.0]), {1: FactorTable(1, np.ones((1, y.size)))})
    # integral of 1 over the full product domain = |[0,2]| * |[0,1]|
    assert l2_inner(f, f, domain_dims=(0, 1)) == pytest.approx(2.0, rel=1e-14)


def test_point_eval_banks_match_tables(rng):
    grid = make_grid([(0, np.pi, 0), (0, 1, 1)], n_sub=3, n_pts=6)
    from tenshom.coeffs import builtin

    sampled = builtin("ex_1D").coeff.sample(grid)
    fun = sampled.entry(0, 0)
    for dim in fun.dims:
        pts = grid.nodes(dim)
        v = fun.factors[dim].bank.eval(pts, 1)
        assert np.abs(v[0] - fun.factors[dim].values).max() <= 1e-14
        assert np.abs(v[1] - fun.factors[dim].d1).max() <= 1e-14

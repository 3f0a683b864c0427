"""Self-check routines shared by the CLI subcommands and the test suite:
finite-difference gradient verification on both loss assemblies, the 1D
harmonic-mean oracle comparison, and quadrature exactness probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .coeffs import (
    CoeffTerm,
    SampledCoefficient,
    TensorCoefficient,
    builtin,
    cos_freq,
    harmonic_homogenized_1d,
    poly,
    sin_freq,
)
from .errors import ConfigError
from .homogenize import CellProblem, assemble_cell_loss
from .macro_solver import MacroProblem, assemble_macro_loss
from .quadrature import Interval1D, build_gauss_rule, build_grid, legendre_rule
from .separable import tabulate_terms
from .tnn import SubnetworkSpec, apply_dirichlet_mask, apply_mean_zero, eval_factor_tables, init_model


def _random_coeff_terms(rng, dims, offset=3.0):
    """A smooth, positive random separable coefficient over the given dims."""
    terms = [CoeffTerm(offset, {})]
    for _ in range(int(rng.integers(1, 3))):
        facs = {}
        for dim, fast in dims:
            kind = rng.integers(0, 3)
            if fast:
                fac = (sin_freq, cos_freq)[kind % 2](int(rng.integers(1, 3)))
            elif kind == 0:
                fac = sin_freq(float(rng.uniform(0.5, 2.0)), scale_2pi=False)
            elif kind == 1:
                fac = cos_freq(float(rng.uniform(0.5, 2.0)), scale_2pi=False)
            else:
                fac = poly([1.0, float(rng.uniform(-0.5, 0.5))])
            facs[dim] = fac
        terms.append(CoeffTerm(float(rng.uniform(-0.8, 0.8)), facs))
    return terms


def _fd_check(objective, params, rng, n_probe, step=3e-5):
    """Central finite differences vs reverse-mode, worst normalized deviation."""
    base = params.flatten()
    g = de.gradient(objective(), params)
    idx = rng.choice(params.size, size=min(n_probe, params.size), replace=False)
    worst = 0.0
    for i in idx:
        xp = base.copy()
        xp[i] += step
        params.assign(xp)
        with de.no_grad():
            fp = float(objective().value)
        xm = base.copy()
        xm[i] -= step
        params.assign(xm)
        with de.no_grad():
            fm = float(objective().value)
        fd = (fp - fm) / (2 * step)
        # deviation normalized so that `worst <= 1e-5` means
        # |fd - g| <= max(1e-5 * |fd|, 1e-8) for every probed parameter
        dev = abs(fd - g[i]) / max(abs(fd), 1e-3)
        worst = max(worst, dev)
    params.assign(base)
    return worst


def gradcheck(seed: int = 0, n_models: int = 50, n_probe: int = 20) -> float:
    """Randomized small models through both loss assemblies; returns the max
    relative deviation between reverse-mode and central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_models):
        n_sub = int(rng.integers(1, 3))
        n_pts = int(rng.integers(3, 5))
        lo = float(rng.uniform(-0.5, 0.5))
        domain = [Interval1D(lo, lo + float(rng.uniform(1.0, 2.5)))]
        grid = build_grid(domain, 1, 1, (n_sub, n_pts))
        p = int(rng.integers(1, 5))
        widths = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))

        if trial % 2 == 0:
            coeff = TensorCoefficient(
                1, 1, {(0, 0): _random_coeff_terms(rng, [(0, False), (1, True)])}, gamma=0.1
            )
            problem = CellProblem(coeff.sample(grid), grid, 1)
            specs = {
                0: SubnetworkSpec(widths=widths),
                1: SubnetworkSpec(widths=widths, periodic=True),
            }
            model = init_model(specs, p, int(rng.integers(0, 2 ** 31)))

            def objective(model=model, problem=problem, grid=grid):
                psi = eval_factor_tables(model, grid, order=2, slow_order=1)
                psi_hat = apply_mean_zero(psi, problem.fast_dims)
                return assemble_cell_loss(problem, psi_hat, 0)

        else:
            coeff = TensorCoefficient(
                1, 1, {(0, 0): _random_coeff_terms(rng, [(0, False)])}, gamma=0.1
            )
            source = tabulate_terms(
                grid, [(1.0, {0: sin_freq(float(rng.uniform(0.5, 2.0)), scale_2pi=False)})],
                order=0,
            )
            problem = MacroProblem(
                SampledCoefficient(1, {(0, 0): coeff.sample(grid).entry(0, 0)}, gamma=0.1),
                source, grid,
            )
            model = init_model({0: SubnetworkSpec(widths=widths)}, p, int(rng.integers(0, 2 ** 31)))

            def objective(model=model, problem=problem, grid=grid):
                phi = eval_factor_tables(model, grid, order=2)
                phi_hat = apply_dirichlet_mask(phi, problem.mask)
                return assemble_macro_loss(problem, phi_hat)

        worst = max(worst, _fd_check(objective, model.params(), rng, n_probe))
    return worst


@dataclass
class OracleReport:
    problem: str
    max_dev: float
    analytic_available: bool


def oracle_check(problem_name: str = "ex_1D") -> OracleReport:
    """Quadrature harmonic mean vs the closed-form homogenized coefficient."""
    prob = builtin(problem_name)
    if prob.d != 1:
        raise ConfigError("analytic homogenization oracle exists only for the 1D builtins")
    grid = build_grid(prob.domain, prob.d, prob.K, (40, 16))
    x = grid.nodes(0)
    quad = harmonic_homogenized_1d(prob.coeff, grid, (0,))
    if problem_name == "ex_1D":
        exact = np.sqrt((np.sin(x) + 2.0) ** 2 - 0.25)
    elif problem_name == "ex_1D_3scale":
        # closed form of the innermost stage, then one numerically robust level
        y1 = grid.nodes(1)
        a1 = np.sqrt((np.sin(2 * np.pi * y1)[None, :] + np.sin(x)[:, None] + 3.0) ** 2 - 0.25)
        w1 = grid.weights(1)
        exact = 1.0 / ((w1[None, :] / a1).sum(axis=1))
    else:
        raise ConfigError(f"no oracle defined for {problem_name!r}")
    return OracleReport(problem_name, float(np.abs(quad - exact).max()), True)


@dataclass
class QuadReport:
    monomial_dev: float
    weight_sum_dev: float
    symmetry_dev: float


def quadcheck() -> QuadReport:
    """Degree-31 exactness of the 16-point rule, weight sums, node symmetry."""
    rule = build_gauss_rule(Interval1D(0.0, 1.0), 1, 16)
    worst = 0.0
    for k in range(32):
        exact = 1.0 / (k + 1)
        got = float(rule.weights @ rule.nodes ** k)
        worst = max(worst, abs(got - exact) / exact)
    wdev = 0.0
    sdev = 0.0
    for n_sub, n_pts, lo, hi in ((1, 2, 0.0, 1.0), (40, 16, 0.0, np.pi), (7, 5, -2.0, 3.0)):
        r = build_gauss_rule(Interval1D(lo, hi), n_sub, n_pts)
        wdev = max(wdev, abs(r.weights.sum() - (hi - lo)) / (hi - lo))
        x, _ = legendre_rule(n_pts)
        sdev = max(sdev, float(np.abs(x + x[::-1]).max()))
    return QuadReport(worst, wdev, sdev)

"""Homogenized Dirichlet problem: training u0 and rebuilding the multiscale field.

u0 is a Dirichlet-masked TNN over the slow dims; the reconstruction evaluates
u0 + sum_k eps^k u_k with fast arguments reduced modulo 1 (lossless by the
structural periodicity of the fast subnets).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coeffs import SampledCoefficient
from .errors import ConfigError
from .quadrature import TensorGrid
from .separable import (
    SeparableFunction,
    broadcast_to_dims,
    collapse_univariate,
    combine,
    derivative,
    drop_null_terms,
    l2_inner,
    multiply,
)
from .tnn import (
    DirichletMask,
    SubnetworkSpec,
    apply_dirichlet_mask,
    eval_factor_tables,
    init_model,
    sine_mask,
)
from .training import TrainConfig, TrainResult, run_training


@dataclass
class MacroProblem:
    """-div(A0 grad u0) = f on the box, u0 = 0 on the boundary."""

    A0: SampledCoefficient  # over slow dims, with slow first-derivative tables
    source: SeparableFunction  # over slow dims (values only needed)
    grid: TensorGrid
    mask: Optional[DirichletMask] = None

    def __post_init__(self):
        self.d = self.A0.d
        self.x_dims = self.grid.dims_of_scale(0)
        if self.mask is None:
            self.mask = sine_mask(self.grid, self.x_dims)
        # entries collapsed where exact (univariate/constant), plus x-derivatives
        self._entries = {}
        self._dA = {}
        for (i, j) in self.A0.index_pairs:
            fun = collapse_univariate(self.A0.entry(i, j))
            self._entries[(i, j)] = fun
            self._entries[(j, i)] = fun
        for (i, k), fun in self._entries.items():
            if self.x_dims[i] in fun.dims:
                da = drop_null_terms(derivative(fun, self.x_dims[i], 1))
                if da.rank:
                    self._dA[(i, k)] = da

    def entry(self, i, k):
        return self._entries.get((i, k))

    def entry_dx(self, i, k):
        return self._dA.get((i, k))


def assemble_macro_loss(problem: MacroProblem, phi_hat: SeparableFunction):
    """Squared residual of sum_i d/dx_i(a_ik d(phi_hat)/dx_k) + f over the box.

    phi_hat must be Dirichlet-masked with second-derivative tables on the
    slow dims. Returns the squared loss (root reported by the caller).
    """
    xd = problem.x_dims
    terms = [(1.0, problem.source)]
    for i in range(problem.d):
        for k in range(problem.d):
            a = problem.entry(i, k)
            if a is None:
                continue
            dphi_k = derivative(phi_hat, xd[k], 1)
            da = problem.entry_dx(i, k)
            if da is not None:
                terms.append((1.0, multiply(da, dphi_k)))
            if i == k:
                d2phi = derivative(phi_hat, xd[k], 2)
            else:
                d2phi = derivative(dphi_k, xd[i], 1)
            terms.append((1.0, multiply(a, d2phi)))
    union = sorted(set().union(*[t.dims for _, t in terms]))
    residual = combine([(s, broadcast_to_dims(t, union)) for s, t in terms])
    return l2_inner(residual, residual, domain_dims=xd)


@dataclass
class MacroSolution:
    model: object
    u0: SeparableFunction  # masked, frozen, with point evaluators
    result: TrainResult


def train_macro(problem: MacroProblem, config: TrainConfig,
                on_checkpoint=None) -> MacroSolution:
    specs = {dim: SubnetworkSpec(widths=tuple(config.widths), periodic=False)
             for dim in problem.x_dims}
    model = init_model(specs, config.p, config.seed)
    params = model.params()

    def objective():
        phi = eval_factor_tables(model, problem.grid, order=2)
        phi_hat = apply_dirichlet_mask(phi, problem.mask)
        return assemble_macro_loss(problem, phi_hat)

    cb = None
    if on_checkpoint is not None:
        cb = lambda step, model=model: on_checkpoint(problem, model, step)
    res = run_training(objective, params, config, on_checkpoint=cb)
    frozen = eval_factor_tables(model, problem.grid, order=2, traced=False)
    u0 = apply_dirichlet_mask(frozen, problem.mask)
    return MacroSolution(model, u0, res)


def gradient_field(u: SeparableFunction, x, grid: TensorGrid) -> np.ndarray:
    """Analytic gradient of a slow-dim separable function at points inside the box."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x_dims = sorted(u.dims)
    for col, dim in enumerate(x_dims):
        iv = grid.rules[dim].interval
        if np.any(x[:, col] < iv.lo - 1e-12) or np.any(x[:, col] > iv.hi + 1e-12):
            raise ValueError(f"point outside the domain along dim {dim}")
    coords = {dim: x[:, col] for col, dim in enumerate(x_dims)}
    return np.stack([u.grad_at(coords, dim) for dim in x_dims], axis=1)


class MultiscaleSolution:
    """u_eps(x) = u0(x) + sum_k eps^k u_k(x, x/eps, ..., x/eps^k).

    correctors come coarsest-first: index 0 is the scale-1 corrector vector.
    Point evaluation runs on the frozen factor banks; fast arguments are
    reduced modulo 1 before subnet evaluation.
    """

    def __init__(self, u0: SeparableFunction, corrector_vectors, epsilon: float,
                 grid: TensorGrid, d: int):
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
        self.u0 = u0
        self.correctors = list(corrector_vectors)
        self.K = len(self.correctors)
        self.epsilon = float(epsilon)
        self.grid = grid
        self.d = d
        self.x_dims = grid.dims_of_scale(0)

    def coords(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.d:
            raise ValueError(f"points need {self.d} columns, got shape {x.shape}")
        out = {}
        for axis in range(self.d):
            out[self.x_dims[axis]] = x[:, axis]
            for scale in range(1, self.K + 1):
                dim = self.grid.dims_of_scale(scale)[axis]
                out[dim] = np.mod(x[:, axis] / self.epsilon ** scale, 1.0)
        return out

    def _grad_u0(self, coords, axis, order=1) -> np.ndarray:
        return self.u0.eval_deriv(coords, {self.x_dims[axis]: order})

    def parts(self, x) -> dict:
        """u0, u1 (and u2), and their eps-weighted sum at physical points."""
        coords = self.coords(x)
        out = {"u0": self.u0.at(coords)}
        g = [self._grad_u0(coords, m) for m in range(self.d)]
        chi1 = self.correctors[0]
        u1 = sum(chi1[j].at(coords) * g[j] for j in range(self.d))
        out["u1"] = u1
        u_eps = out["u0"] + self.epsilon * u1
        if self.K >= 2:
            y1 = self.grid.dims_of_scale(1)
            chi2 = self.correctors[1]
            m2 = []
            for m in range(self.d):
                dy1_u1 = sum(chi1[j].eval_deriv(coords, {y1[m]: 1}) * g[j]
                             for j in range(self.d))
                m2.append(g[m] + dy1_u1)
            u2 = sum(chi2[m].at(coords) * m2[m] for m in range(self.d))
            out["u2"] = u2
            u_eps = u_eps + self.epsilon ** 2 * u2
        out["u_eps"] = u_eps
        return out

    def u_eps_at(self, x) -> np.ndarray:
        return self.parts(x)["u_eps"]

    def u0_at(self, x) -> np.ndarray:
        return self.u0.at(self.coords(x))

    def corrector_gradient_comparator(self, x, axis: int = 0) -> np.ndarray:
        """du0/dx_m + du1/dy1_m: the oscillation-resolved gradient proxy."""
        coords = self.coords(x)
        g = [self._grad_u0(coords, m) for m in range(self.d)]
        y1 = self.grid.dims_of_scale(1)
        chi1 = self.correctors[0]
        dy1_u1 = sum(chi1[j].eval_deriv(coords, {y1[axis]: 1}) * g[j]
                     for j in range(self.d))
        return g[axis] + dy1_u1

    def grad_u_eps_at(self, x) -> np.ndarray:
        """Full chain-rule gradient of the reconstructed field, (n, d)."""
        coords = self.coords(x)
        eps = self.epsilon
        g = [self._grad_u0(coords, m) for m in range(self.d)]
        gg = [[self.u0.eval_deriv(coords, {self.x_dims[m]: 1, self.x_dims[j]: 1})
               if m != j else self.u0.eval_deriv(coords, {self.x_dims[m]: 2})
               for j in range(self.d)] for m in range(self.d)]
        y1 = self.grid.dims_of_scale(1)
        chi1 = self.correctors[0]
        out = []
        for m in range(self.d):
            total = g[m].copy()
            # eps * d(u1)/dx_m + d(u1)/dy1_m
            dx_u1 = sum(
                chi1[j].eval_deriv(coords, {self.x_dims[m]: 1}) * g[j]
                + chi1[j].at(coords) * gg[m][j]
                for j in range(self.d)
            ) if set(self.x_dims) & set(chi1[0].dims) else sum(
                chi1[j].at(coords) * gg[m][j] for j in range(self.d)
            )
            dy_u1 = sum(chi1[j].eval_deriv(coords, {y1[m]: 1}) * g[j]
                        for j in range(self.d))
            total = total + eps * dx_u1 + dy_u1
            if self.K >= 2:
                total = total + self._grad_u2_terms(coords, g, gg, m)
            out.append(total)
        return np.stack(out, axis=1)

    def _grad_u2_terms(self, coords, g, gg, m):
        """eps^2 dx u2 + eps dy1 u2 + dy2 u2 for the K = 2 reconstruction."""
        eps = self.epsilon
        y1 = self.grid.dims_of_scale(1)
        y2 = self.grid.dims_of_scale(2)
        chi1, chi2 = self.correctors[0], self.correctors[1]

        def m2(n):
            return g[n] + sum(chi1[j].eval_deriv(coords, {y1[n]: 1}) * g[j]
                              for j in range(self.d))

        def dx_m2(n):
            out = gg[m][n]
            for j in range(self.d):
                if set(self.x_dims) & set(chi1[j].dims):
                    out = out + chi1[j].eval_deriv(
                        coords, {y1[n]: 1, self.x_dims[m]: 1}) * g[j]
                out = out + chi1[j].eval_deriv(coords, {y1[n]: 1}) * gg[m][j]
            return out

        def dy1_m2(n):
            return sum(chi1[j].eval_deriv(coords, {y1[n]: 1, y1[m]: 1}) * g[j]
                       for j in range(self.d))

        total = 0.0
        for n in range(self.d):
            chi = chi2[n]
            has_x = set(self.x_dims) & set(chi.dims)
            dx_chi = chi.eval_deriv(coords, {self.x_dims[m]: 1}) if has_x else 0.0
            total = total + eps ** 2 * (dx_chi * m2(n) + chi.at(coords) * dx_m2(n))
            total = total + eps * (
                chi.eval_deriv(coords, {y1[m]: 1}) * m2(n)
                + chi.at(coords) * dy1_m2(n)
            )
            total = total + chi.eval_deriv(coords, {y2[m]: 1}) * m2(n)
        return total


def reconstruct(macro: MacroSolution, corrector_vectors, epsilon: float,
                grid: TensorGrid, d: int) -> MultiscaleSolution:
    """corrector_vectors: per scale coarsest-first, each a list of d correctors."""
    return MultiscaleSolution(macro.u0, corrector_vectors, epsilon, grid, d)

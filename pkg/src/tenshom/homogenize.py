"""Cell-problem training and homogenized-coefficient extraction.

Stages run from the finest scale group inward: each stage trains d corrector
networks for its fast group, integrates the fast group out of the coefficient,
and hands the resulting separable coefficient to the next stage. Supports one
or two fast groups.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coeffs import EllipticityReport, SampledCoefficient, ellipticity_report
from .errors import ConfigError
from .quadrature import TensorGrid
from .separable import (
    SeparableFunction,
    broadcast_to_dims,
    combine,
    derivative,
    drop_null_terms,
    l2_inner,
    multiply,
    partial_integrate,
)
from .tnn import SubnetworkSpec, TnnModel, apply_mean_zero, eval_factor_tables, init_model
from .training import TrainConfig, TrainResult, run_training


@dataclass
class CellProblem:
    """One homogenization stage: corrector equations in the `fast_scale` group."""

    coeff: SampledCoefficient
    grid: TensorGrid
    fast_scale: int

    def __post_init__(self):
        d = self.coeff.d
        self.fast_dims = self.grid.dims_of_scale(self.fast_scale)
        if len(self.fast_dims) != d:
            raise ConfigError(f"grid has no complete fast group at scale {self.fast_scale}")
        self.domain_dims = self.grid.dims_up_to_scale(self.fast_scale)
        dep = set(self.coeff.dims())
        slower = {dim for dim in dep if dim < min(self.fast_dims)}
        self.model_dims = tuple(sorted(set(self.fast_dims) | slower))
        # coefficient fast-derivative entries, with exactly-zero terms dropped
        self._dA = {}
        for i in range(d):
            for k in range(d):
                a = self.coeff.entry(i, k)
                if a is None or self.fast_dims[i] not in a.dims:
                    continue
                da = drop_null_terms(derivative(a, self.fast_dims[i], 1))
                if da.rank:
                    self._dA[(i, k)] = da

    @property
    def d(self) -> int:
        return self.coeff.d

    def coefficient_fast_derivative(self, i: int, k: int) -> Optional[SeparableFunction]:
        return self._dA.get((i, k))


def assemble_cell_loss(problem: CellProblem, psi_hat: SeparableFunction, j: int):
    """Squared strong-form residual of the corrector equation for direction j.

    residual = sum_{i,k} [ d(a_ik)/dy_i * d(psi_hat)/dy_k
                           + a_ik * d2(psi_hat)/dy_k dy_i ]  +  sum_i d(a_ij)/dy_i
    integrated over the full stage domain via pairwise 1D contractions.
    The value is the square of the reported loss (root taken for display).
    Fast derivatives annihilate the mean-zero wrapper's constant part, so the
    loss is identical for the wrapped and unwrapped ansatz.
    """
    fd = problem.fast_dims
    d = problem.d
    terms = []
    for i in range(d):
        dpsi_cache = {}
        for k in range(d):
            a = problem.coeff.entry(i, k)
            if a is None:
                continue
            da = problem.coefficient_fast_derivative(i, k)
            if k not in dpsi_cache:
                dpsi_cache[k] = derivative(psi_hat, fd[k], 1)
            dpsi_k = dpsi_cache[k]
            if da is not None:
                terms.append((1.0, multiply(da, dpsi_k)))
            if i == k:
                d2psi = derivative(psi_hat, fd[k], 2)
            else:
                d2psi = derivative(dpsi_k, fd[i], 1)
            terms.append((1.0, multiply(a, d2psi)))
        daj = problem.coefficient_fast_derivative(i, j)
        if daj is not None:
            terms.append((1.0, daj))
    if not terms:
        raise ConfigError("cell residual is empty: coefficient has no entries")
    union = sorted(set().union(*[t.dims for _, t in terms]))
    residual = combine([(s, broadcast_to_dims(t, union)) for s, t in terms])
    return l2_inner(residual, residual, domain_dims=problem.domain_dims)


def corrector_specs(problem: CellProblem, config: TrainConfig) -> dict:
    specs = {}
    for dim in problem.model_dims:
        periodic = problem.grid.tags[dim].scale >= 1
        specs[dim] = SubnetworkSpec(widths=tuple(config.widths), periodic=periodic)
    return specs


@dataclass
class CellSolution:
    fast_scale: int
    models: list
    correctors: list  # mean-zero-wrapped frozen SeparableFunctions, one per direction
    results: list  # TrainResult per direction
    structural: dict = field(default_factory=dict)

    @property
    def histories(self):
        return [r.history for r in self.results]

    @property
    def best_losses(self):
        return [r.best_loss for r in self.results]


def train_cell(problem: CellProblem, config: TrainConfig,
               on_checkpoint=None) -> CellSolution:
    """Train one corrector model per direction j (independent seeds).

    The objective feeds the unwrapped ansatz to the loss (exactly equal to the
    wrapped one there); the stored correctors are mean-zero wrapped.
    """
    models = []
    correctors = []
    results = []
    for j in range(problem.d):
        specs = corrector_specs(problem, config)
        model = init_model(specs, config.p, config.seed + j)
        params = model.params()

        def objective():
            psi = eval_factor_tables(model, problem.grid, order=2, slow_order=1)
            return assemble_cell_loss(problem, psi, j)

        cb = None
        if on_checkpoint is not None:
            cb = lambda step, model=model, j=j: on_checkpoint(problem, model, j, step)
        res = run_training(objective, params, config, on_checkpoint=cb)
        frozen = eval_factor_tables(model, problem.grid, order=2, slow_order=1, traced=False)
        chi_hat = apply_mean_zero(frozen, problem.fast_dims)
        models.append(model)
        correctors.append(chi_hat)
        results.append(res)
    sol = CellSolution(problem.fast_scale, models, correctors, results)
    sol.structural = structural_checks(problem, sol)
    return sol


def structural_checks(problem: CellProblem, sol: CellSolution) -> dict:
    """Post-training re-check of the wrapper guarantees (worst over directions)."""
    from .separable import dense_eval_oracle, l2_norm

    worst_mean = 0.0
    worst_norm = 0.0
    for chi in sol.correctors:
        mean = partial_integrate(chi, problem.fast_dims)
        scale = l2_norm(chi) or 1.0
        if mean.dims:
            worst_mean = max(worst_mean, float(np.abs(dense_eval_oracle(mean)).max()) / scale)
        else:
            worst_mean = max(worst_mean, abs(float(np.sum(np.asarray(mean.coeffs)))) / scale)
        for dim in chi.dims:
            w = problem.grid.weights(dim)
            v = chi.factors[dim].values
            # only the unwrapped half is normalized; constants have norm <= 1
            p = v.shape[0] // 2
            norms = np.sqrt(((v[:p] ** 2) * w).sum(axis=1))
            worst_norm = max(worst_norm, float(np.abs(norms - 1.0).max()))
    return {"mean_zero_rel": worst_mean, "factor_norm_dev": worst_norm}


def compute_homogenized_coefficient(
    problem: CellProblem, sol: CellSolution, symmetrize: bool = True
) -> SampledCoefficient:
    """a*_ij = integral over the fast group of (a_ij + sum_k a_ik d(chi_j)/dy_k).

    Returned in separable form with factors inherited from the coefficient and
    corrector tables; symmetrized as (M + M^T)/2 unless disabled. The raw
    asymmetry is recorded on the result as `asymmetry_raw`.
    """
    d = problem.d
    fd = problem.fast_dims
    entries = {}
    for i in range(d):
        for j in range(d):
            terms = []
            a_ij = problem.coeff.entry(i, j)
            if a_ij is not None:
                terms.append((1.0, a_ij))
            for k in range(d):
                a_ik = problem.coeff.entry(i, k)
                if a_ik is None:
                    continue
                dchi = drop_null_terms(derivative(sol.correctors[j], fd[k], 1))
                if dchi.rank:
                    terms.append((1.0, multiply(a_ik, dchi)))
            if not terms:
                continue
            union = sorted(set().union(set(fd), *[t.dims for _, t in terms]))
            total = combine([(s, broadcast_to_dims(t, union)) for s, t in terms])
            entries[(i, j)] = partial_integrate(total, fd)
    raw = SampledCoefficient(d, entries, gamma=problem.coeff.gamma)
    asym = raw.asymmetry() if d > 1 else 0.0
    out = raw.symmetrized() if symmetrize else raw
    out.asymmetry_raw = asym
    return out


@dataclass
class StageRecord:
    fast_scale: int
    best_losses: list
    asymmetry_raw: float
    ellipticity: Optional[EllipticityReport]
    structural: dict


@dataclass
class HomogenizeResult:
    A0: SampledCoefficient
    solutions: list  # CellSolutions, finest scale first
    stage_coefficients: list  # SampledCoefficient after each stage, finest first
    records: list


def homogenize_recursive(
    coeff: SampledCoefficient,
    grid: TensorGrid,
    configs,
    on_checkpoint=None,
) -> HomogenizeResult:
    """Run the cascade from the finest scale group down to the macro coefficient.

    configs: one TrainConfig per stage, finest first (a single config is reused).
    """
    K = grid.n_scales - 1
    if K not in (1, 2):
        raise ConfigError(f"supported scale counts are 1 and 2, got K={K}")
    if isinstance(configs, TrainConfig):
        configs = [configs] * K
    if len(configs) != K:
        raise ConfigError(f"need {K} stage configs, got {len(configs)}")
    current = coeff
    solutions = []
    stage_coeffs = []
    records = []
    for idx, scale in enumerate(range(K, 0, -1)):
        problem = CellProblem(current, grid, scale)
        sol = train_cell(problem, configs[idx], on_checkpoint=on_checkpoint)
        current = compute_homogenized_coefficient(problem, sol)
        ell = None
        if current.d <= 2:
            ell = ellipticity_report(current, gamma=current.gamma)
            if not ell.ok:
                warnings.warn(
                    f"homogenized coefficient at scale {scale} violates ellipticity "
                    f"bounds: eigs in [{ell.min_eig:.4g}, {ell.max_eig:.4g}] vs gamma "
                    f"{ell.gamma:.4g} (under-trained correctors?)",
                    RuntimeWarning,
                )
        solutions.append(sol)
        stage_coeffs.append(current)
        records.append(
            StageRecord(scale, sol.best_losses, getattr(current, "asymmetry_raw", 0.0),
                        ell, sol.structural)
        )
    return HomogenizeResult(current, solutions, stage_coeffs, records)

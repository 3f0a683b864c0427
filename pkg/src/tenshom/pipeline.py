"""Stage orchestration: cell training, coefficient extraction, macro solve,
reconstruction, FEM comparison, and artifact/report emission."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem_ref
from .coeffs import (
    BuiltinProblem,
    SampledCoefficient,
    ellipticity_report,
    harmonic_homogenized_1d,
)
from .config import PipelineConfig, config_to_dict
from .errors import ConfigError
from .homogenize import HomogenizeResult, homogenize_recursive
from .macro_solver import MacroProblem, MultiscaleSolution, reconstruct, train_macro
from .quadrature import TensorGrid
from .separable import collapse_univariate, dense_eval_oracle, val
from .tnn import save_checkpoint

REPORT_VERSION = 1


def _write_csv(path, header, rows, deterministic=False):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for x in row:
                if isinstance(x, float):
                    cells.append(repr(x))
                else:
                    cells.append(str(x))
            fh.write(",".join(cells) + "\n")


def _history_rows(history, deterministic):
    return [
        (r.step, float(r.loss), float(r.grad_norm), 0.0 if deterministic else float(r.wall_ms))
        for r in history
    ]


@dataclass
class PipelineState:
    config: PipelineConfig
    problem: BuiltinProblem
    grid: TensorGrid
    sampled: SampledCoefficient = None
    homog: Optional[HomogenizeResult] = None
    macro_solution: object = None
    reconstructions: dict = field(default_factory=dict)   # eps -> MultiscaleSolution
    summary: dict = field(default_factory=dict)

    @property
    def out_dir(self) -> str:
        return self.config.out_dir


def make_state(config: PipelineConfig) -> PipelineState:
    problem = config.resolve_problem()
    grid = config.build_grid(problem)
    os.makedirs(config.out_dir, exist_ok=True)
    state = PipelineState(config, problem, grid)
    state.summary = {
        "report_version": REPORT_VERSION,
        "problem": problem.name,
        "d": problem.d,
        "K": problem.K,
        "seed": config.seed,
        "deterministic": config.deterministic,
        "warnings": [],
        "stages": [],
        "wall_s": {},
    }
    with open(os.path.join(config.out_dir, "config.json"), "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
    return state


def _weighted_rel_l2(values, reference, weight_axes):
    diff2 = (values - reference) ** 2
    ref2 = reference ** 2
    for ax, w in enumerate(weight_axes):
        shape = [1] * diff2.ndim
        shape[ax] = -1
        diff2 = diff2 * w.reshape(shape)
        ref2 = ref2 * w.reshape(shape)
    return float(np.sqrt(diff2.sum() / ref2.sum()))


def stage_homogenize(state: PipelineState) -> PipelineState:
    cfg = state.config
    prob = state.problem
    t0 = time.perf_counter()
    state.sampled = prob.coeff.sample(state.grid)
    ell0 = ellipticity_report(state.sampled, gamma=prob.coeff.gamma)
    if not ell0.ok:
        state.summary["warnings"].append(
            f"input coefficient outside [gamma, 1/gamma]: eigs "
            f"[{ell0.min_eig:.4g}, {ell0.max_eig:.4g}], gamma {ell0.gamma:.4g}"
        )
    configs = cfg.stage_configs(prob.K)
    state.homog = homogenize_recursive(state.sampled, state.grid, configs)

    for sol, rec, coeff in zip(state.homog.solutions, state.homog.records,
                               state.homog.stage_coefficients):
        scale = rec.fast_scale
        stage_doc = {
            "fast_scale": scale,
            "best_losses": [float(x) for x in rec.best_losses],
            "asymmetry_raw": float(rec.asymmetry_raw),
            "structural": rec.structural,
        }
        if rec.ellipticity is not None:
            stage_doc["ellipticity"] = {
                "min_eig": rec.ellipticity.min_eig,
                "max_eig": rec.ellipticity.max_eig,
                "gamma": rec.ellipticity.gamma,
                "ok": rec.ellipticity.ok,
            }
            if not rec.ellipticity.ok:
                state.summary["warnings"].append(
                    f"stage {scale}: homogenized coefficient ellipticity violated"
                )
        for j, (model, res) in enumerate(zip(sol.models, sol.results)):
            _write_csv(
                os.path.join(state.out_dir, f"loss_stage{scale}_dir{j + 1}.csv"),
                ("step", "loss", "grad_norm", "wall_ms"),
                _history_rows(res.history, cfg.deterministic),
            )
            save_checkpoint(model, os.path.join(state.out_dir,
                                                f"model_stage{scale}_dir{j + 1}.json"))
        # oracle comparison for 1D problems: analytic/derived harmonic mean
        if prob.d == 1:
            keep = state.grid.dims_up_to_scale(scale - 1)
            oracle = harmonic_homogenized_1d(prob.coeff, state.grid, keep)
            got = dense_eval_oracle(coeff.entry(0, 0))
            weights = [state.grid.weights(dim) for dim in keep]
            rel = _weighted_rel_l2(got, oracle, weights)
            stage_doc["coefficient_rel_l2_vs_oracle"] = rel
        state.summary["stages"].append(stage_doc)
    state.summary["wall_s"]["homogenize"] = time.perf_counter() - t0
    _export_coefficient(state)
    return state


def _export_coefficient(state: PipelineState):
    """Tabulate the final homogenized coefficient entries at the slow nodes."""
    A0 = state.homog.A0
    grid = state.grid
    xdims = grid.dims_of_scale(0)
    nodes = [grid.nodes(dim) for dim in xdims]
    header = [grid.tags[dim].label for dim in xdims]
    entries = {}
    for (i, j) in A0.index_pairs:
        fun = A0.entry(i, j)
        if fun is None:
            continue
        tab = dense_eval_oracle(fun)
        entries[f"a{i + 1}{j + 1}"] = np.broadcast_to(
            tab, tuple(n.size for n in nodes)
        ) if tab.ndim else np.full(tuple(n.size for n in nodes), float(tab))
    mesh = np.meshgrid(*nodes, indexing="ij")
    rows = []
    for idx in np.ndindex(*[n.size for n in nodes]):
        row = [float(m[idx]) for m in mesh] + [float(v[idx]) for v in entries.values()]
        rows.append(row)
    _write_csv(os.path.join(state.out_dir, "homogenized_coefficient.csv"),
               header + list(entries), rows, state.config.deterministic)


def stage_macro(state: PipelineState) -> PipelineState:
    cfg = state.config
    t0 = time.perf_counter()
    source = state.problem.source(state.grid)
    problem = MacroProblem(state.homog.A0, source, state.grid)
    state.macro_problem = problem
    state.macro_solution = train_macro(problem, cfg.macro_config())
    res = state.macro_solution.result
    _write_csv(os.path.join(state.out_dir, "loss_macro.csv"),
               ("step", "loss", "grad_norm", "wall_ms"),
               _history_rows(res.history, cfg.deterministic))
    save_checkpoint(state.macro_solution.model, os.path.join(state.out_dir, "model_macro.json"))
    state.summary["macro_best_loss"] = float(res.best_loss)
    state.summary["wall_s"]["macro"] = time.perf_counter() - t0
    return state


def _u0_reference(state: PipelineState):
    """FEM solve of the homogenized equation with the best available coefficient."""
    prob = state.problem
    fem = state.config.fem
    if prob.d == 1:
        mesh = fem_ref.Mesh1D(prob.domain[0], fem.macro_ref_n_el)
        return fem_ref.solve_dirichlet_1d(
            lambda x: _harmonic_at(prob, x), prob.source_at, mesh
        )
    # 2D: Q1 with the extracted coefficient (entries constant or separable in x)
    A0 = state.homog.A0
    n = fem.n_2d_min

    def a_fun(pts):
        fun = A0.entry(0, 0)
        coords = {dim: pts[:, k] for k, dim in enumerate(state.grid.dims_of_scale(0))
                  if dim in fun.dims}
        if not fun.dims:
            return np.full(pts.shape[0], float(val(fun.coeffs).sum()))
        return fun.at(coords)

    f_fun = lambda pts: prob.source_at(pts)
    return fem_ref.solve_dirichlet_q1_2d(a_fun, f_fun, n, tuple(prob.domain))


def _harmonic_at(prob: BuiltinProblem, x: np.ndarray) -> np.ndarray:
    """1D analytic-oracle homogenized coefficient at arbitrary slow points."""
    from .quadrature import Interval1D, build_gauss_rule

    rule = build_gauss_rule(Interval1D(0.0, 1.0), 25, 8)
    x = np.asarray(x, dtype=float).ravel()
    wout = np.ones(())
    base = {}
    for k in range(1, prob.K + 1):
        s = [1] * (1 + prob.K)
        s[k] = rule.size
        base[k] = rule.nodes.reshape(s)
        wout = wout * rule.weights.reshape(s)
    out = np.empty(x.size)
    chunk = max(1, int(2e7 // rule.size ** prob.K))
    for lo in range(0, x.size, chunk):
        hi = min(x.size, lo + chunk)
        coords = dict(base)
        coords[0] = x[lo:hi].reshape((-1,) + (1,) * prob.K)
        a = np.broadcast_to(
            prob.coeff.evaluate(0, 0, coords),
            (hi - lo,) + (rule.size,) * prob.K,
        )
        recip = (wout / a).sum(axis=tuple(range(1, 1 + prob.K)))
        out[lo:hi] = 1.0 / recip
    return out


def stage_reconstruct(state: PipelineState) -> PipelineState:
    """Build the multiscale evaluators per epsilon and export plot profiles."""
    macro = state.macro_solution
    corr_vectors = [sol.correctors for sol in reversed(state.homog.solutions)]
    for eps in state.config.eps_list:
        state.reconstructions[eps] = reconstruct(
            macro, corr_vectors, eps, state.grid, state.problem.d)
    _export_profiles(state)
    return state


def stage_compare(state: PipelineState) -> PipelineState:
    """Compare u0 and the reconstructed u_eps against direct FEM references."""
    cfg = state.config
    prob = state.problem
    fem = cfg.fem
    t0 = time.perf_counter()

    # u0 accuracy against the homogenized-equation reference
    u0_ref = _u0_reference(state)
    macro = state.macro_solution
    xdims = state.grid.dims_of_scale(0)
    if prob.d == 1:
        u0_fn = lambda x: macro.u0.at({xdims[0]: x})
        u0_grad = lambda x: macro.u0.grad_at({xdims[0]: x}, xdims[0])
        rep = fem_ref.error_norms(u0_fn, u0_ref, u0_grad)
    else:
        u0_fn = lambda pts: macro.u0.at({xdims[0]: pts[:, 0], xdims[1]: pts[:, 1]})

        def u0_grad(pts):
            coords = {xdims[0]: pts[:, 0], xdims[1]: pts[:, 1]}
            return np.stack([macro.u0.grad_at(coords, dim) for dim in xdims], axis=1)

        rep = fem_ref.error_norms(u0_fn, u0_ref, u0_grad)
    state.summary["u0_vs_fem"] = {
        "abs_l2": rep.abs_l2, "rel_l2": rep.rel_l2,
        "abs_h1": rep.abs_h1, "rel_h1": rep.rel_h1,
    }

    rows = []
    eps_reports = {}
    for eps in cfg.eps_list:
        ms = state.reconstructions[eps]
        if prob.d == 1:
            n_el = max(int(np.ceil(64.0 / eps ** prob.K)), fem.n_el_1d_min)
            mesh = fem_ref.Mesh1D(prob.domain[0], n_el)
            a_eps = prob.coeff.eps_entry(0, 0, eps)
            ref = fem_ref.solve_dirichlet_1d(lambda x: a_eps(x), prob.source_at, mesh)
            cand = lambda x: ms.u_eps_at(x)
            grad = lambda x: ms.grad_u_eps_at(x)[:, 0]
            rep = fem_ref.error_norms(cand, ref, grad)
            mesh_used = n_el
        else:
            n = min(max(int(np.ceil(32.0 / eps)), fem.n_2d_min), fem.n_2d_cap)
            a_eps = prob.coeff.eps_entry(0, 0, eps)
            ref = fem_ref.solve_dirichlet_q1_2d(
                lambda p: a_eps(p), prob.source_at, n, tuple(prob.domain))
            cand = lambda p: ms.u_eps_at(p)
            grad = lambda p: ms.grad_u_eps_at(p)
            rep = fem_ref.error_norms(cand, ref, grad)
            mesh_used = n
        rows.append((float(eps), rep.abs_l2, rep.rel_l2))
        eps_reports[repr(eps)] = {
            "abs_l2": rep.abs_l2, "rel_l2": rep.rel_l2,
            "abs_h1": rep.abs_h1, "rel_h1": rep.rel_h1, "fem_mesh": mesh_used,
        }
    _write_csv(os.path.join(state.out_dir, "errors_eps.csv"),
               ("eps", "abs_l2", "rel_l2"), rows, cfg.deterministic)
    state.summary["errors_eps"] = eps_reports
    state.summary["wall_s"]["compare"] = time.perf_counter() - t0
    return state


def _export_profiles(state: PipelineState, n_plot: int = 401):
    """Solution and gradient profiles on a uniform plotting grid, one file per eps."""
    prob = state.problem
    if prob.d == 1:
        iv = prob.domain[0]
        xs = np.linspace(iv.lo, iv.hi, n_plot)
        pts = xs
    else:
        iv0, iv1 = prob.domain
        m = 51
        g0 = np.linspace(iv0.lo, iv0.hi, m)
        g1 = np.linspace(iv1.lo, iv1.hi, m)
        X, Y = np.meshgrid(g0, g1, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    for eps, ms in state.reconstructions.items():
        parts = ms.parts(pts)
        if prob.d == 1:
            header = ["x", "u0", "u1"] + (["u2"] if "u2" in parts else []) + ["u_eps"]
            cols = [xs, parts["u0"], parts["u1"]]
            if "u2" in parts:
                cols.append(parts["u2"])
            cols.append(parts["u_eps"])
        else:
            header = ["x", "y", "u0", "u1"] + (["u2"] if "u2" in parts else []) + ["u_eps"]
            cols = [pts[:, 0], pts[:, 1], parts["u0"], parts["u1"]]
            if "u2" in parts:
                cols.append(parts["u2"])
            cols.append(parts["u_eps"])
        rows = list(zip(*[np.asarray(c, dtype=float).tolist() for c in cols]))
        _write_csv(os.path.join(state.out_dir, f"solution_profile_eps{eps:.6g}.csv"),
                   header, rows, state.config.deterministic)
        if prob.d == 1:
            coords = ms.coords(pts)
            du0 = ms._grad_u0(coords, 0)
            comb = ms.corrector_gradient_comparator(pts)
            full = ms.grad_u_eps_at(pts)[:, 0]
            rows = list(zip(xs.tolist(), du0.tolist(), comb.tolist(), full.tolist()))
            _write_csv(
                os.path.join(state.out_dir, f"gradient_profile_eps{eps:.6g}.csv"),
                ["x", "du0_dx", "du0_dx_plus_du1_dy", "du_eps_dx"],
                rows, state.config.deterministic)


def emit_report(state: PipelineState) -> dict:
    summary = state.summary
    path = os.path.join(state.out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    lines = [f"tenshom report: problem {summary['problem']} (d={summary['d']}, K={summary['K']})"]
    for stage in summary.get("stages", []):
        lines.append(
            f"  stage y{stage['fast_scale']}: best losses "
            + ", ".join(f"{x:.3e}" for x in stage["best_losses"])
        )
        if "coefficient_rel_l2_vs_oracle" in stage:
            lines.append(
                f"    coefficient rel L2 vs oracle: {stage['coefficient_rel_l2_vs_oracle']:.3e}"
            )
    if "macro_best_loss" in summary:
        lines.append(f"  macro best loss: {summary['macro_best_loss']:.3e}")
    if "u0_vs_fem" in summary:
        u = summary["u0_vs_fem"]
        lines.append(f"  u0 vs FEM: abs L2 {u['abs_l2']:.4e}, rel L2 {u['rel_l2']:.4e}")
    for eps, rep in summary.get("errors_eps", {}).items():
        lines.append(
            f"  eps={eps}: abs L2 {rep['abs_l2']:.4e}, rel L2 {rep['rel_l2']:.4e}"
            f" (fem mesh {rep['fem_mesh']})"
        )
    for w in summary.get("warnings", []):
        lines.append(f"  WARNING: {w}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(state.out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return summary


def run_pipeline(config: PipelineConfig) -> dict:
    state = make_state(config)
    stage_homogenize(state)
    stage_macro(state)
    stage_reconstruct(state)
    stage_compare(state)
    return emit_report(state)

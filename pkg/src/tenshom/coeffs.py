"""Multiscale coefficient representations and the built-in example problems.

Coefficients are sums of separable terms with hand-written 1D factor
derivatives. The closed-form object (TensorCoefficient) samples onto a grid
as SeparableFunctions; homogenization stages hand the sampled form around.
Also provides the 1D harmonic-mean homogenization oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, RefSolveError
from .quadrature import TensorGrid
from .separable import (
    CallableBank,
    Factor1D,
    SeparableFunction,
    combine,
    const_factor,
    tabulate_terms,
    val,
)

TWO_PI = 2.0 * np.pi


# -- 1D primitives ---------------------------------------------------------

def sin_freq(freq: float, scale_2pi: bool = True, shift: float = 0.0) -> Factor1D:
    om = TWO_PI * freq if scale_2pi else float(freq)
    return Factor1D(
        lambda t: np.sin(om * np.asarray(t, dtype=float) + shift),
        lambda t: om * np.cos(om * np.asarray(t, dtype=float) + shift),
        lambda t: -om * om * np.sin(om * np.asarray(t, dtype=float) + shift),
    )


def cos_freq(freq: float, scale_2pi: bool = True, shift: float = 0.0) -> Factor1D:
    om = TWO_PI * freq if scale_2pi else float(freq)
    return Factor1D(
        lambda t: np.cos(om * np.asarray(t, dtype=float) + shift),
        lambda t: -om * np.sin(om * np.asarray(t, dtype=float) + shift),
        lambda t: -om * om * np.cos(om * np.asarray(t, dtype=float) + shift),
    )


def poly(coeffs) -> Factor1D:
    c = np.asarray(coeffs, dtype=float)
    c1 = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)
    c2 = np.polynomial.polynomial.polyder(c1) if c1.size > 1 else np.zeros(1)
    pv = np.polynomial.polynomial.polyval
    return Factor1D(
        lambda t: pv(np.asarray(t, dtype=float), c),
        lambda t: pv(np.asarray(t, dtype=float), c1) * np.ones_like(np.asarray(t, dtype=float)),
        lambda t: pv(np.asarray(t, dtype=float), c2) * np.ones_like(np.asarray(t, dtype=float)),
    )


PRIMITIVES = {"sin_freq": sin_freq, "cos_freq": cos_freq, "const": const_factor, "poly": poly}


# -- coefficient objects -----------------------------------------------------

@dataclass(frozen=True)
class CoeffTerm:
    scale: float
    factors: dict  # dim index -> Factor1D; missing dims mean constant 1


class TensorCoefficient:
    """Closed-form d x d symmetric coefficient over (x, y_1, ..., y_K).

    Only nonzero entries are stored; entries(i, j) of a scalar coefficient
    alias one term list on the diagonal. Dim indices follow the grid layout
    dim = scale * d + axis.
    """

    def __init__(self, d: int, K: int, entries: dict, gamma: float):
        self.d = d
        self.K = K
        self.gamma = float(gamma)
        self._entries = {}
        for (i, j), terms in entries.items():
            self._entries[(i, j)] = terms
            self._entries[(j, i)] = terms

    def entry_terms(self, i: int, j: int):
        return self._entries.get((i, j))

    @property
    def index_pairs(self):
        return sorted({(i, j) for (i, j) in self._entries if i <= j})

    def dims(self):
        out = set()
        for terms in self._entries.values():
            for t in terms:
                out.update(t.factors)
        return tuple(sorted(out))

    def dim_of(self, scale: int, axis: int) -> int:
        return scale * self.d + axis

    def evaluate(self, i: int, j: int, coords: dict) -> np.ndarray:
        """Entry value at broadcastable per-dim coordinate arrays."""
        terms = self.entry_terms(i, j)
        if terms is None:
            shapes = [np.shape(c) for c in coords.values()]
            return np.zeros(np.broadcast_shapes(*shapes)) if shapes else np.zeros(())
        acc = 0.0
        for t in terms:
            part = t.scale
            for dim, fac in t.factors.items():
                part = part * fac.fn(np.asarray(coords[dim], dtype=float))
            acc = acc + part
        return np.asarray(acc, dtype=float)

    def eps_entry(self, i: int, j: int, eps: float):
        """A_ij(x, x/eps, ..., x/eps^K) as a callable of physical points (n, d)."""

        def f(x):
            return self.evaluate(i, j, multiscale_coords(x, eps, self.d, self.K))

        return f

    def sample(self, grid: TensorGrid, order: int = 1) -> "SampledCoefficient":
        entries = {}
        for (i, j) in self.index_pairs:
            fun = tabulate_terms(
                grid,
                [(t.scale, t.factors) for t in self.entry_terms(i, j)],
                order=order,
            )
            entries[(i, j)] = fun
            entries[(j, i)] = fun
        return SampledCoefficient(self.d, entries, gamma=self.gamma)


def multiscale_coords(x, eps: float, d: int, K: int) -> dict:
    """Physical points (n, d) or (n,) -> per-dim coordinates, fast args mod 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != d:
        raise ValueError(f"points must have {d} columns, got {x.shape}")
    coords = {}
    for axis in range(d):
        coords[axis] = x[:, axis]
        for scale in range(1, K + 1):
            coords[scale * d + axis] = np.mod(x[:, axis] / eps ** scale, 1.0)
    return coords


class SampledCoefficient:
    """Coefficient entries as SeparableFunctions on a shared grid.

    This is also the carrier for homogenized coefficients: the entries keep
    factor tables with first derivatives and off-grid evaluation banks.
    """

    def __init__(self, d: int, entries: dict, gamma: Optional[float] = None):
        self.d = d
        self.gamma = gamma
        self._entries = dict(entries)

    def entry(self, i: int, j: int) -> Optional[SeparableFunction]:
        return self._entries.get((i, j))

    @property
    def index_pairs(self):
        return sorted({(i, j) for (i, j) in self._entries if i <= j})

    def dims(self):
        out = set()
        for fun in self._entries.values():
            out.update(fun.dims)
        return tuple(sorted(out))

    def symmetrized(self) -> "SampledCoefficient":
        """(M + M^T) / 2; exact symmetry by construction afterwards."""
        entries = {}
        for (i, j) in self.index_pairs:
            a = self._entries.get((i, j))
            b = self._entries.get((j, i))
            if i == j or a is b:
                fun = a
            elif a is None:
                fun = combine([(0.5, b)])
            elif b is None:
                fun = combine([(0.5, a)])
            else:
                fun = combine([(0.5, a), (0.5, b)])
            if fun is not None:
                entries[(i, j)] = fun
                entries[(j, i)] = fun
        return SampledCoefficient(self.d, entries, gamma=self.gamma)

    def asymmetry(self) -> float:
        """Max L2 mismatch between a_ij and a_ji, relative to the diagonal scale
        (off-diagonals may be exactly zero for isotropic problems)."""
        from .separable import l2_norm

        scale = max(
            (l2_norm(self._entries[(i, i)]) for i in range(self.d) if (i, i) in self._entries),
            default=0.0,
        )
        if scale == 0.0:
            return np.inf
        worst = 0.0
        for (i, j) in self.index_pairs:
            if i == j:
                continue
            a = self._entries.get((i, j))
            b = self._entries.get((j, i))
            if a is None and b is None:
                continue
            if a is None or b is None:
                diff = a if b is None else b
            else:
                diff = combine([(1.0, a), (-1.0, b)])
            worst = max(worst, l2_norm(diff) / scale)
        return worst


@dataclass
class EllipticityReport:
    min_eig: float
    max_eig: float
    gamma: float
    ok: bool


def _strided_tables(fun: SeparableFunction, max_nodes: int):
    dims = fun.dims
    sizes = [val(fun.factors[d].values).shape[1] for d in dims]
    steps = [1] * len(dims)
    while int(np.prod([(n + s - 1) // s for n, s in zip(sizes, steps)])) > max_nodes:
        k = int(np.argmax([n / s for n, s in zip(sizes, steps)]))
        steps[k] *= 2
    tables = [val(fun.factors[d].values)[:, ::s] for d, s in zip(dims, steps)]
    return tables


def _dense_on_subgrid(fun: SeparableFunction, max_nodes: int = 10 ** 6) -> np.ndarray:
    if not fun.dims:
        return np.asarray(float(val(fun.coeffs).sum()))
    tables = _strided_tables(fun, max_nodes)
    letters = "abcdefgh"[: len(tables)]
    spec = "r," + ",".join(f"r{c}" for c in letters) + "->" + letters
    return np.einsum(spec, val(fun.coeffs), *tables, optimize=True)


def ellipticity_report(coeff: SampledCoefficient, gamma: Optional[float] = None) -> EllipticityReport:
    """Eigenvalue range of the entry matrix over (a subsample of) grid nodes.

    d = 1 uses the entry values directly; d = 2 uses trace/determinant.
    Subsampling kicks in only above 10^6 tensor nodes.
    """
    gamma = gamma if gamma is not None else (coeff.gamma or 0.0)
    if coeff.d == 1:
        a = _dense_on_subgrid(coeff.entry(0, 0))
        lo, hi = float(a.min()), float(a.max())
    elif coeff.d == 2:
        sym = coeff.symmetrized()

        def dense(i, j):
            fun = sym.entry(i, j)
            return 0.0 if fun is None else _dense_on_subgrid(fun)

        a11, a22, a12 = dense(0, 0), dense(1, 1), dense(0, 1)
        a11, a22, a12 = np.broadcast_arrays(a11, a22, a12)
        half_tr = 0.5 * (a11 + a22)
        disc = np.sqrt(np.maximum(0.25 * (a11 - a22) ** 2 + a12 ** 2, 0.0))
        lo = float((half_tr - disc).min())
        hi = float((half_tr + disc).max())
    else:
        raise ConfigError(f"ellipticity check implemented for d <= 2, got d={coeff.d}")
    tol = 1e-10 * max(1.0, abs(hi))
    ok = gamma > 0 and lo >= gamma - tol and hi <= 1.0 / gamma + tol
    return EllipticityReport(lo, hi, gamma, ok)


# -- built-in problems --------------------------------------------------------

from .quadrature import Interval1D  # noqa: E402  (after dataclass defs on purpose)


@dataclass
class BuiltinProblem:
    name: str
    d: int
    K: int
    domain: list
    coeff: TensorCoefficient
    source_terms: list

    def source(self, grid: TensorGrid) -> SeparableFunction:
        return tabulate_terms(grid, self.source_terms, order=0)

    def source_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        acc = 0.0
        for scale, facs in self.source_terms:
            part = scale
            for dim, fac in facs.items():
                part = part * fac.fn(x[:, dim])
            acc = acc + part
        return np.asarray(acc, dtype=float) * np.ones(x.shape[0])


def builtin(name: str) -> BuiltinProblem:
    sin_x = sin_freq(1.0, scale_2pi=False)
    cos_x = cos_freq(1.0, scale_2pi=False)
    if name == "ex_1D":
        coeff = TensorCoefficient(
            d=1, K=1,
            entries={(0, 0): [
                CoeffTerm(0.5, {1: sin_freq(1)}),
                CoeffTerm(1.0, {0: sin_x}),
                CoeffTerm(2.0, {}),
            ]},
            gamma=0.25,
        )
        return BuiltinProblem("ex_1D", 1, 1, [Interval1D(0.0, np.pi)], coeff,
                              [(1.0, {0: sin_x})])
    if name == "ex_2D_1":
        terms = [
            CoeffTerm(2.0, {}),
            CoeffTerm(1.0, {2: sin_freq(1), 3: cos_freq(1)}),
        ]
        coeff = TensorCoefficient(d=2, K=1, entries={(0, 0): terms, (1, 1): terms}, gamma=0.25)
        return BuiltinProblem(
            "ex_2D_1", 2, 1, [Interval1D(0.0, 1.0), Interval1D(0.0, 1.0)], coeff,
            [(1.0, {0: sin_x}), (1.0, {1: cos_x})],
        )
    if name == "ex_2D_2":
        terms = [
            CoeffTerm(0.5, {2: sin_freq(1), 3: sin_freq(1)}),
            CoeffTerm(1.0, {0: sin_x}),
            CoeffTerm(1.0, {1: sin_x}),
            CoeffTerm(3.0, {}),
        ]
        coeff = TensorCoefficient(d=2, K=1, entries={(0, 0): terms, (1, 1): terms}, gamma=1.0 / 6.0)
        return BuiltinProblem(
            "ex_2D_2", 2, 1, [Interval1D(0.0, np.pi), Interval1D(0.0, np.pi)], coeff,
            [(1.0, {0: sin_x, 1: sin_x})],
        )
    if name == "ex_1D_3scale":
        coeff = TensorCoefficient(
            d=1, K=2,
            entries={(0, 0): [
                CoeffTerm(0.5, {2: sin_freq(1)}),
                CoeffTerm(1.0, {1: sin_freq(1)}),
                CoeffTerm(1.0, {0: sin_x}),
                CoeffTerm(3.0, {}),
            ]},
            gamma=1.0 / 6.0,
        )
        return BuiltinProblem("ex_1D_3scale", 1, 2, [Interval1D(0.0, np.pi)], coeff,
                              [(1.0, {0: sin_x})])
    raise ConfigError(f"unknown builtin problem {name!r}")


BUILTIN_NAMES = ("ex_1D", "ex_2D_1", "ex_2D_2", "ex_1D_3scale")


# -- 1D analytic/harmonic oracle ----------------------------------------------

def harmonic_homogenized_1d(coeff: TensorCoefficient, grid: TensorGrid, keep_dims) -> np.ndarray:
    """1 / integral of 1/A over the non-kept fast dims, at each kept node combo.

    d = 1 only. Returns an array shaped like the kept dims' node counts.
    The reciprocal integrand is not separable, so this is a dense (chunked)
    quadrature — the independent oracle for the trained coefficient.
    """
    if coeff.d != 1:
        raise ConfigError("harmonic homogenization oracle is 1D only")
    keep_dims = tuple(sorted(keep_dims))
    int_dims = tuple(
        i for i, t in enumerate(grid.tags) if t.scale >= 1 and i not in keep_dims
    )
    if not int_dims:
        raise ValueError("nothing to integrate: all fast dims kept")
    kept_nodes = [grid.nodes(d) for d in keep_dims]
    int_nodes = [grid.nodes(d) for d in int_dims]
    int_weights = [grid.weights(d) for d in int_dims]

    kept_shape = tuple(n.size for n in kept_nodes)
    out = np.empty(kept_shape if kept_shape else ())

    ndim_total = len(keep_dims) + len(int_dims)

    def shaped(vec, pos):
        s = [1] * ndim_total
        s[pos] = vec.size
        return vec.reshape(s)

    wout = 1.0
    for k, w in enumerate(int_weights):
        wout = wout * shaped(w, len(keep_dims) + k)

    # chunk over the first kept dim to bound the dense mesh
    n0 = kept_shape[0] if kept_shape else 1
    int_count = int(np.prod([n.size for n in int_nodes]))
    chunk = max(1, int(2e7 // max(int_count, 1)))
    for lo in range(0, n0, chunk):
        hi = min(n0, lo + chunk)
        coords = {}
        for k, d in enumerate(keep_dims):
            nodes = kept_nodes[k][lo:hi] if k == 0 else kept_nodes[k]
            coords[d] = shaped(nodes, k)
        for k, d in enumerate(int_dims):
            coords[d] = shaped(int_nodes[k], len(keep_dims) + k)
        a = coeff.evaluate(0, 0, coords)
        a = np.broadcast_to(
            a,
            (hi - lo, *kept_shape[1:], *[n.size for n in int_nodes])
            if kept_shape
            else tuple(n.size for n in int_nodes),
        )
        if np.any(a <= 0):
            raise RefSolveError("coefficient non-positive inside the cell: ellipticity violated")
        recip = (wout / a).sum(axis=tuple(range(len(keep_dims), ndim_total)))
        if kept_shape:
            out[lo:hi] = 1.0 / recip
        else:
            out = 1.0 / recip
    return out

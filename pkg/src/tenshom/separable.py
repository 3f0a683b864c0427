"""Algebra of rank-R tensor-product functions tabulated on a TensorGrid.

A SeparableFunction is sum_r coeff_r * prod_i f_{r,i}(x_i) with per-dimension
value/derivative tables at the quadrature nodes. Inner products contract as
products of one-dimensional weighted sums, which is what keeps every
high-dimensional integral in the pipeline cheap and quadrature-exact.

Tables may be plain float64 arrays (frozen functions) or diffengine Tensors
(inside a training tape); the algebra is written once for both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import diffengine as de
from .diffengine import Tensor, val
from .errors import RankGuardError
from .quadrature import TensorGrid

RANK_GUARD = 5000
DENSE_GUARD = 10 ** 6


# -- closed-form 1D factors and point-evaluation banks ------------------------

@dataclass(frozen=True)
class Factor1D:
    """A scalar factor with hand-written derivatives (vectorized callables)."""

    fn: Callable
    d1: Callable
    d2: Optional[Callable] = None


def const_factor(c: float) -> Factor1D:
    return Factor1D(
        lambda t, c=c: np.full_like(np.asarray(t, dtype=float), c),
        lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    )


F_ONE = const_factor(1.0)


class FactorBank:
    """Off-grid evaluator for one dimension of a separable function.

    eval(pts, order) returns the tuple of (R, n) channel arrays
    (values[, first derivatives[, second derivatives]]).
    """

    def eval(self, pts: np.ndarray, order: int):
        raise NotImplementedError


class CallableBank(FactorBank):
    def __init__(self, rows):
        self.rows = list(rows)

    def eval(self, pts, order):
        pts = np.asarray(pts, dtype=float)
        chans = []
        for o in range(order + 1):
            mat = np.empty((len(self.rows), pts.size))
            for r, fac in enumerate(self.rows):
                fn = (fac.fn, fac.d1, fac.d2)[o]
                if fn is None:
                    raise ValueError(f"factor lacks derivative order {o}")
                mat[r] = np.asarray(fn(pts), dtype=float)
            chans.append(mat)
        return tuple(chans)


class ConstBank(FactorBank):
    def __init__(self, consts):
        self.consts = np.asarray(consts, dtype=float)

    def eval(self, pts, order):
        pts = np.asarray(pts, dtype=float)
        v = np.broadcast_to(self.consts[:, None], (self.consts.size, pts.size))
        z = np.zeros((self.consts.size, pts.size))
        return (v, z, z)[: order + 1]


class SubnetBank(FactorBank):
    """Normalized subnetwork factors frozen at a parameter snapshot."""

    def __init__(self, subnet, norms):
        self.subnet = subnet
        self.norms = np.asarray(norms, dtype=float)

    def eval(self, pts, order):
        with de.no_grad():
            chans = self.subnet.channels(np.asarray(pts, dtype=float), order)
        return tuple(val(c) / self.norms[:, None] for c in chans[: order + 1] if c is not None)


def _outer_rows(x, y):
    rx, n = x.shape
    ry = y.shape[0]
    return (x.reshape(rx, 1, n) * y.reshape(1, ry, n)).reshape(rx * ry, n)


class ProductBank(FactorBank):
    def __init__(self, a: FactorBank, b: FactorBank):
        self.a = a
        self.b = b

    def eval(self, pts, order):
        A = self.a.eval(pts, order)
        B = self.b.eval(pts, order)
        out = [_outer_rows(A[0], B[0])]
        if order >= 1:
            out.append(_outer_rows(A[1], B[0]) + _outer_rows(A[0], B[1]))
        if order >= 2:
            out.append(_outer_rows(A[2], B[0]) + 2.0 * _outer_rows(A[1], B[1])
                       + _outer_rows(A[0], B[2]))
        return tuple(out)


class ConcatBank(FactorBank):
    def __init__(self, banks):
        self.banks = list(banks)

    def eval(self, pts, order):
        parts = [b.eval(pts, order) for b in self.banks]
        return tuple(np.vstack([p[o] for p in parts]) for o in range(order + 1))


class ShiftBank(FactorBank):
    """Derivative substitution: channel o of this bank is channel o+shift below."""

    def __init__(self, bank: FactorBank, shift: int):
        self.bank = bank
        self.shift = shift

    def eval(self, pts, order):
        return self.bank.eval(pts, order + self.shift)[self.shift:]


class SelectBank(FactorBank):
    def __init__(self, bank: FactorBank, idx):
        self.bank = bank
        self.idx = np.asarray(idx, dtype=int)

    def eval(self, pts, order):
        return tuple(ch[self.idx] for ch in self.bank.eval(pts, order))


# -- tables and the separable function ----------------------------------------

@dataclass
class FactorTable:
    """Per-dimension (R, N) tables: values and optional first/second derivatives."""

    dim: int
    values: object
    d1: object = None
    d2: object = None
    bank: Optional[FactorBank] = None


@dataclass
class SeparableFunction:
    grid: TensorGrid
    coeffs: object          # (R,) ndarray or Tensor
    factors: dict           # dim index -> FactorTable, ascending keys

    @property
    def rank(self) -> int:
        return int(val(self.coeffs).shape[0])

    @property
    def dims(self) -> tuple:
        return tuple(sorted(self.factors))

    def table(self, dim: int) -> FactorTable:
        return self.factors[dim]

    # Point evaluation (post-training; requires banks on every dim).
    def eval_deriv(self, coords: dict, orders: Optional[dict] = None) -> np.ndarray:
        orders = orders or {}
        n = None
        for d in self.dims:
            if d not in coords:
                raise ValueError(f"missing coordinate array for dim {d}")
            n = np.asarray(coords[d]).size
        if n is None and coords:
            n = np.asarray(next(iter(coords.values()))).size
        if any(o >= 1 and d not in self.factors for d, o in orders.items()):
            return np.zeros(1 if n is None else n)  # constant along that dim
        if not self.dims:
            return np.full(1 if n is None else n, float(val(self.coeffs).sum()))
        acc = np.repeat(val(self.coeffs)[:, None], n, axis=1)
        for d in self.dims:
            bank = self.factors[d].bank
            if bank is None:
                raise ValueError(f"dim {d} has no point evaluator")
            o = int(orders.get(d, 0))
            acc = acc * bank.eval(np.asarray(coords[d], dtype=float), o)[o]
        return acc.sum(axis=0)

    def at(self, coords: dict) -> np.ndarray:
        return self.eval_deriv(coords)

    def grad_at(self, coords: dict, dim: int) -> np.ndarray:
        return self.eval_deriv(coords, {dim: 1})


def _check_same_grid(f: SeparableFunction, g: SeparableFunction):
    if f.grid is not g.grid:
        raise ValueError("separable operands live on different grids")


def _guard_rank(r: int):
    if r > RANK_GUARD:
        raise RankGuardError(f"separable rank {r} exceeds guard {RANK_GUARD}")


def _concat(parts, axis=0):
    if any(isinstance(p, Tensor) for p in parts):
        return de.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def _sum_all(x):
    return x.sum() if isinstance(x, Tensor) else float(np.sum(x))


def _transpose(x):
    return x.T


# -- operations ----------------------------------------------------------------

def l2_inner(f: SeparableFunction, g: SeparableFunction, domain_dims=None):
    """Quadrature L2 inner product, contracted dimension by dimension.

    domain_dims may list extra dimensions of the integration domain that
    neither function depends on; each contributes its interval length.
    Returns a float, or a Tensor when either operand is inside a tape.
    """
    _check_same_grid(f, g)
    if f.dims != g.dims:
        raise ValueError(f"dimension sets differ: {f.dims} vs {g.dims}")
    total = f.coeffs.reshape(f.rank, 1) * g.coeffs.reshape(1, g.rank)
    for dim in f.dims:
        w = f.grid.weights(dim)
        gram = (f.factors[dim].values * w) @ _transpose(g.factors[dim].values)
        total = total * gram
    out = _sum_all(total)
    if domain_dims is not None:
        measure = 1.0
        for dim in domain_dims:
            if dim not in f.factors:
                measure *= f.grid.length(dim)
        out = out * measure
    return out


def l2_norm(f: SeparableFunction, domain_dims=None) -> float:
    s = l2_inner(f, f, domain_dims)
    return float(np.sqrt(max(val(s), 0.0)))


def combine(terms) -> SeparableFunction:
    """Linear combination sum_k scale_k * f_k without factor recomputation."""
    terms = list(terms)
    if not terms:
        raise ValueError("combine needs at least one term")
    grid = terms[0][1].grid
    dims = terms[0][1].dims
    for _, f in terms[1:]:
        _check_same_grid(terms[0][1], f)
        if f.dims != dims:
            raise ValueError(f"dimension sets differ: {dims} vs {f.dims}")
    _guard_rank(sum(f.rank for _, f in terms))
    coeffs = _concat([s * f.coeffs for s, f in terms], axis=0)
    factors = {}
    for dim in dims:
        tabs = [f.factors[dim] for _, f in terms]
        values = _concat([t.values for t in tabs], axis=0)
        d1 = _concat([t.d1 for t in tabs], axis=0) if all(t.d1 is not None for t in tabs) else None
        d2 = _concat([t.d2 for t in tabs], axis=0) if all(t.d2 is not None for t in tabs) else None
        bank = ConcatBank([t.bank for t in tabs]) if all(t.bank is not None for t in tabs) else None
        factors[dim] = FactorTable(dim, values, d1, d2, bank)
    return SeparableFunction(grid, coeffs, factors)


def _ones_table(grid, dim, rank) -> FactorTable:
    n = grid.nodes(dim).size
    z = np.zeros((rank, n))
    return FactorTable(dim, np.ones((rank, n)), z, z, ConstBank(np.ones(rank)))


def broadcast_to_dims(f: SeparableFunction, dims) -> SeparableFunction:
    """Extend f over extra dims as a constant (unit factor, zero derivatives)."""
    dims = tuple(sorted(dims))
    if set(f.dims) - set(dims):
        raise ValueError("broadcast target must contain the function's dims")
    factors = dict(f.factors)
    for dim in dims:
        if dim not in factors:
            factors[dim] = _ones_table(f.grid, dim, f.rank)
    return SeparableFunction(f.grid, f.coeffs, {d: factors[d] for d in dims})


def _outer_tables(x, y):
    rx = val(x).shape[0]
    ry = val(y).shape[0]
    n = val(x).shape[1]
    prod = x.reshape(rx, 1, n) * y.reshape(1, ry, n)
    return prod.reshape(rx * ry, n)


def multiply(f: SeparableFunction, g: SeparableFunction) -> SeparableFunction:
    """Pointwise product; rank R_f * R_g, derivatives by the product rule.

    Dimensions missing from either operand broadcast as the constant 1.
    """
    _check_same_grid(f, g)
    dims = tuple(sorted(set(f.dims) | set(g.dims)))
    _guard_rank(f.rank * g.rank)
    fb = broadcast_to_dims(f, dims)
    gb = broadcast_to_dims(g, dims)
    coeffs = (fb.coeffs.reshape(f.rank, 1) * gb.coeffs.reshape(1, g.rank)).reshape(f.rank * g.rank)
    factors = {}
    for dim in dims:
        tf, tg = fb.factors[dim], gb.factors[dim]
        values = _outer_tables(tf.values, tg.values)
        d1 = d2 = None
        if tf.d1 is not None and tg.d1 is not None:
            d1 = _outer_tables(tf.d1, tg.values) + _outer_tables(tf.values, tg.d1)
            if tf.d2 is not None and tg.d2 is not None:
                d2 = (_outer_tables(tf.d2, tg.values)
                      + 2.0 * _outer_tables(tf.d1, tg.d1)
                      + _outer_tables(tf.values, tg.d2))
        bank = ProductBank(tf.bank, tg.bank) if tf.bank is not None and tg.bank is not None else None
        factors[dim] = FactorTable(dim, values, d1, d2, bank)
    return SeparableFunction(f.grid, coeffs, factors)


def partial_integrate(f: SeparableFunction, dims) -> SeparableFunction:
    """Integrate out `dims`; their per-term integrals fold into the coefficients."""
    dims = tuple(sorted(dims))
    if not dims:
        raise ValueError("partial_integrate needs a nonempty dimension subset")
    if set(dims) - set(f.dims):
        raise ValueError(f"cannot integrate {dims} out of dims {f.dims}")
    coeffs = f.coeffs
    for dim in dims:
        w = f.grid.weights(dim)
        coeffs = coeffs * (f.factors[dim].values * w).sum(axis=1)
    remaining = {d: t for d, t in f.factors.items() if d not in dims}
    return SeparableFunction(f.grid, coeffs, remaining)


def derivative(f: SeparableFunction, dim: int, order: int = 1) -> SeparableFunction:
    """Substitute the dim's derivative table for its value table (rank unchanged)."""
    if dim not in f.factors:
        raise ValueError(f"dim {dim} not in function dims {f.dims}")
    t = f.factors[dim]
    if order == 1:
        if t.d1 is None:
            raise ValueError(f"dim {dim} carries no first-derivative table")
        new = FactorTable(dim, t.d1, t.d2, None,
                          ShiftBank(t.bank, 1) if t.bank is not None else None)
    elif order == 2:
        if t.d2 is None:
            raise ValueError(f"dim {dim} carries no second-derivative table")
        new = FactorTable(dim, t.d2, None, None,
                          ShiftBank(t.bank, 2) if t.bank is not None else None)
    else:
        raise ValueError("derivative order must be 1 or 2")
    factors = dict(f.factors)
    factors[dim] = new
    return SeparableFunction(f.grid, f.coeffs, factors)


def drop_null_terms(f: SeparableFunction) -> SeparableFunction:
    """Remove terms that are exactly zero (zero coefficient, or some dimension
    whose present channels are all identically zero). Plain-array tables only;
    traced functions are returned unchanged."""
    if isinstance(f.coeffs, Tensor) or any(
        isinstance(t.values, Tensor) for t in f.factors.values()
    ):
        return f
    keep = np.asarray(f.coeffs) != 0.0
    for t in f.factors.values():
        alive = np.any(t.values != 0.0, axis=1)
        for ch in (t.d1, t.d2):
            if ch is not None:
                alive |= np.any(ch != 0.0, axis=1)
        keep &= alive
    if keep.all():
        return f
    idx = np.flatnonzero(keep)
    factors = {
        d: FactorTable(
            d,
            t.values[idx],
            None if t.d1 is None else t.d1[idx],
            None if t.d2 is None else t.d2[idx],
            None if t.bank is None else SelectBank(t.bank, idx),
        )
        for d, t in f.factors.items()
    }
    return SeparableFunction(f.grid, np.asarray(f.coeffs)[idx], factors)


def dense_eval_oracle(f: SeparableFunction) -> np.ndarray:
    """Brute-force tensor of values at the full node product (test oracle)."""
    dims = f.dims
    if not dims:
        return np.asarray(float(val(f.coeffs).sum()))
    shape = [f.grid.nodes(d).size for d in dims]
    if int(np.prod(shape)) > DENSE_GUARD:
        raise ValueError(f"dense evaluation of {shape} exceeds {DENSE_GUARD} nodes")
    letters = "abcdefgh"[: len(dims)]
    spec = "r," + ",".join(f"r{c}" for c in letters) + "->" + letters
    tables = [val(f.factors[d].values) for d in dims]
    return np.einsum(spec, val(f.coeffs), *tables, optimize=True)


def dense_l2_inner(f: SeparableFunction, g: SeparableFunction, domain_dims=None) -> float:
    """Dense-grid counterpart of l2_inner (independent route for tests)."""
    df = dense_eval_oracle(f)
    dg = dense_eval_oracle(g)
    acc = df * dg
    for ax, dim in enumerate(f.dims):
        shape = [1] * acc.ndim
        shape[ax] = -1
        acc = acc * f.grid.weights(dim).reshape(shape)
    out = float(acc.sum())
    if domain_dims is not None:
        for dim in domain_dims:
            if dim not in f.factors:
                out *= f.grid.length(dim)
    return out


def tabulate_terms(grid: TensorGrid, terms, order: int = 1) -> SeparableFunction:
    """Sample closed-form separable terms onto the grid.

    terms: list of (scale, {dim: Factor1D}); dimensions missing from a term
    are treated as the constant 1. Tables carry derivatives up to `order` and
    every dimension gets a CallableBank for off-grid evaluation.
    """
    dims = tuple(sorted({d for _, facs in terms for d in facs}))
    coeffs = np.array([float(s) for s, _ in terms])
    factors = {}
    for dim in dims:
        nodes = grid.nodes(dim)
        rows = [facs.get(dim, F_ONE) for _, facs in terms]
        values = np.vstack([np.asarray(r.fn(nodes), dtype=float) for r in rows])
        d1 = d2 = None
        if order >= 1:
            d1 = np.vstack([np.asarray(r.d1(nodes), dtype=float) for r in rows])
        if order >= 2:
            if any(r.d2 is None for r in rows):
                raise ValueError("second derivative requested but a factor lacks d2")
            d2 = np.vstack([np.asarray(r.d2(nodes), dtype=float) for r in rows])
        factors[dim] = FactorTable(dim, values, d1, d2, CallableBank(rows))
    return SeparableFunction(grid, coeffs, factors)


def collapse_univariate(f: SeparableFunction) -> SeparableFunction:
    """Exact rank-1 re-tabulation of a function of at most one variable.

    Not a compression: summing the terms of a univariate (or constant)
    separable function loses nothing. Multivariate functions pass through.
    """
    if len(f.dims) > 1:
        return f
    if not f.dims:
        return SeparableFunction(f.grid, np.array([float(val(f.coeffs).sum())]), {})
    dim = f.dims[0]
    t = f.factors[dim]
    c = val(f.coeffs)
    values = (c[:, None] * val(t.values)).sum(axis=0, keepdims=True)
    d1 = None if t.d1 is None else (c[:, None] * val(t.d1)).sum(axis=0, keepdims=True)
    d2 = None if t.d2 is None else (c[:, None] * val(t.d2)).sum(axis=0, keepdims=True)
    bank = None
    if t.bank is not None:
        bank = _CollapsedBank(t.bank, c)
    return SeparableFunction(
        f.grid, np.array([1.0]), {dim: FactorTable(dim, values, d1, d2, bank)}
    )


class _CollapsedBank(FactorBank):
    def __init__(self, bank: FactorBank, coeffs):
        self.bank = bank
        self.coeffs = np.asarray(coeffs, dtype=float)

    def eval(self, pts, order):
        chans = self.bank.eval(pts, order)
        return tuple((self.coeffs[:, None] * ch).sum(axis=0, keepdims=True) for ch in chans)

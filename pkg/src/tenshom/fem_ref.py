"""Finite-element reference solvers and error norms.

P1 Dirichlet and periodic-cell solvers in 1D (tridiagonal / sparse direct),
a Q1 tensor-grid Dirichlet solver in 2D (Jacobi-preconditioned CG), and
elementwise L2/H1-seminorm error computation against point evaluators.
The independent oracle route for everything the trained pipeline produces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .errors import RefSolveError
from .quadrature import Interval1D

_GAUSS2 = (np.array([-1.0, 1.0]) / np.sqrt(3.0) * 0.5 + 0.5, np.array([0.5, 0.5]))
_GAUSS4_X, _GAUSS4_W = np.polynomial.legendre.leggauss(4)
_GAUSS4 = (0.5 * (_GAUSS4_X + 1.0), 0.5 * _GAUSS4_W)


@dataclass(frozen=True)
class Mesh1D:
    interval: Interval1D
    n_el: int

    def __post_init__(self):
        if self.n_el < 2:
            raise RefSolveError(f"need at least 2 elements, got {self.n_el}")

    @property
    def h(self) -> float:
        return self.interval.length / self.n_el

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.interval.lo, self.interval.hi, self.n_el + 1)


@dataclass
class P1Solution:
    mesh: Mesh1D
    values: np.ndarray  # nodal, including boundary


@dataclass
class Q1Solution:
    domain: tuple  # (Interval1D, Interval1D)
    n: int
    values: np.ndarray  # (n+1, n+1) nodal grid, including boundary


@dataclass
class ErrorReport:
    abs_l2: float
    rel_l2: float
    abs_h1: Optional[float] = None
    rel_h1: Optional[float] = None


def _element_averages_1d(a: Callable, mesh: Mesh1D) -> np.ndarray:
    """Integral of a over each element by 2-point Gauss (exactness O(h^4))."""
    xg, wg = _GAUSS2
    xs = mesh.nodes[:-1, None] + mesh.h * xg[None, :]
    av = np.asarray(a(xs.ravel()), dtype=float).reshape(xs.shape)
    if np.any(av <= 0):
        raise RefSolveError("coefficient non-positive at a quadrature point")
    return mesh.h * (av * wg[None, :]).sum(axis=1)


def solve_dirichlet_1d(a: Callable, f: Callable, mesh: Mesh1D) -> P1Solution:
    """P1 Galerkin for -(a u')' = f with homogeneous Dirichlet ends."""
    h = mesh.h
    Ie = _element_averages_1d(a, mesh)  # integral of a per element
    ke = Ie / (h * h)
    n = mesh.n_el + 1
    diag = np.zeros(n)
    diag[:-1] += ke
    diag[1:] += ke
    off = -ke  # coupling between e and e+1

    xg, wg = _GAUSS2
    xs = mesh.nodes[:-1, None] + h * xg[None, :]
    fv = np.asarray(f(xs.ravel()), dtype=float).reshape(xs.shape)
    rhs = np.zeros(n)
    rhs[:-1] += h * (fv * (1.0 - xg)[None, :] * wg[None, :]).sum(axis=1)
    rhs[1:] += h * (fv * xg[None, :] * wg[None, :]).sum(axis=1)

    ab = np.zeros((3, n - 2))
    ab[0, 1:] = off[1:-1]
    ab[1, :] = diag[1:-1]
    ab[2, :-1] = off[1:-1]
    inner = solve_banded((1, 1), ab, rhs[1:-1])
    vals = np.zeros(n)
    vals[1:-1] = inner

    # backward-error residual check (Galerkin orthogonality sanity)
    resid = diag[1:-1] * inner
    resid[1:] += off[1:-1] * inner[:-1]
    resid[:-1] += off[1:-1] * inner[1:]
    scale = np.abs(diag).max() * np.linalg.norm(inner) + np.linalg.norm(rhs[1:-1])
    rel = np.linalg.norm(resid - rhs[1:-1]) / max(scale, 1e-300)
    if rel > 1e-10:
        raise RefSolveError(f"1D solve backward error {rel:.2e} above 1e-10")
    return P1Solution(mesh, vals)


def solve_cell_periodic_1d(a_slice: Callable, n_el: int):
    """P1 periodic corrector on [0, 1]: -(a (chi' + 1))' = 0, mean zero.

    Returns (nodes, chi) with nodes = j/n_el for j = 0..n_el-1. The constant
    nullspace is removed by pinning one node and subtracting the discrete mean.
    """
    mesh = Mesh1D(Interval1D(0.0, 1.0), n_el)
    h = mesh.h
    Ie = _element_averages_1d(a_slice, mesh)
    ke = Ie / (h * h)

    idx = np.arange(n_el)
    nxt = (idx + 1) % n_el
    rows = np.concatenate([idx, idx, nxt, nxt])
    cols = np.concatenate([idx, nxt, idx, nxt])
    vals = np.concatenate([ke, -ke, -ke, ke])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n_el, n_el)).tocsr()

    rhs = np.zeros(n_el)
    np.add.at(rhs, idx, Ie / h)    # phi_left' = -1/h against -a
    np.add.at(rhs, nxt, -Ie / h)   # phi_right' = +1/h

    keep = np.arange(1, n_el)
    Ared = A[keep][:, keep]
    chi = np.zeros(n_el)
    try:
        chi[1:] = spla.spsolve(Ared.tocsc(), rhs[keep])
    except Exception as exc:  # singular only if a <= 0 somewhere
        raise RefSolveError(f"periodic cell system solve failed: {exc}") from exc
    chi -= h * chi.sum()  # discrete mean on the periodic uniform mesh
    return mesh.nodes[:-1], chi


def homogenized_from_slice(a_slice: Callable, n_el: int) -> float:
    """integral of a (1 + chi') over the cell from the discrete corrector."""
    nodes, chi = solve_cell_periodic_1d(a_slice, n_el)
    h = 1.0 / n_el
    dchi = (np.roll(chi, -1) - chi) / h
    mesh = Mesh1D(Interval1D(0.0, 1.0), n_el)
    Ie = _element_averages_1d(a_slice, mesh)
    return float((Ie * (1.0 + dchi)).sum())


def _q1_reference_data():
    """Q1 shape values/gradients at the 2x2 Gauss points of the unit square."""
    gx, gw = _GAUSS2
    pts = [(xi, eta) for eta in gx for xi in gx]
    wts = np.array([wx * wy for wy in gw for wx in gw])
    N = np.array([[(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta]
                  for xi, eta in pts])
    dN_dxi = np.array([[-(1 - eta), (1 - eta), -eta, eta] for xi, eta in pts])
    dN_deta = np.array([[-(1 - xi), -xi, (1 - xi), xi] for xi, eta in pts])
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts]), wts, N, dN_dxi, dN_deta


def solve_dirichlet_q1_2d(a: Callable, f: Callable, n: int, domain) -> Q1Solution:
    """Q1 bilinear elements on an n x n tensor mesh, CG with Jacobi preconditioning.

    a and f take (m, 2) point arrays. Memory guard n <= 2048; relative
    residual target 1e-10 within 50 n iterations.
    """
    if n > 2048:
        raise RefSolveError(f"mesh guard: n={n} exceeds 2048")
    ivx, ivy = domain
    hx = ivx.length / n
    hy = ivy.length / n
    xs = np.linspace(ivx.lo, ivx.hi, n + 1)
    ys = np.linspace(ivy.lo, ivy.hi, n + 1)

    xi, eta, wts, N, dN_dxi, dN_deta = _q1_reference_data()
    ngauss = wts.size
    cell_x0 = np.repeat(xs[:-1], n)   # cell index c = ix * n + iy
    cell_y0 = np.tile(ys[:-1], n)
    gp = np.empty((n * n, ngauss, 2))
    gp[:, :, 0] = cell_x0[:, None] + hx * xi[None, :]
    gp[:, :, 1] = cell_y0[:, None] + hy * eta[None, :]
    av = np.asarray(a(gp.reshape(-1, 2)), dtype=float).reshape(n * n, ngauss)
    if np.any(av <= 0):
        raise RefSolveError("coefficient non-positive at a 2D quadrature point")
    fv = np.asarray(f(gp.reshape(-1, 2)), dtype=float).reshape(n * n, ngauss)

    gradx = dN_dxi / hx
    grady = dN_deta / hy
    # K[g, a, b] at unit Jacobian; scaled by a(x_g) w_g hx hy per cell
    Kg = gradx[:, :, None] * gradx[:, None, :] + grady[:, :, None] * grady[:, None, :]
    Kcell = np.einsum("cg,g,gab->cab", av, wts * hx * hy, Kg, optimize=True)
    Fcell = np.einsum("cg,g,ga->ca", fv, wts * hx * hy, N, optimize=True)

    ix = np.repeat(np.arange(n), n)
    iy = np.tile(np.arange(n), n)

    def node_id(i, j):
        return i * (n + 1) + j

    conn = np.stack(
        [node_id(ix, iy), node_id(ix + 1, iy), node_id(ix, iy + 1), node_id(ix + 1, iy + 1)],
        axis=1,
    )
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    S = sp.coo_matrix((Kcell.ravel(), (rows, cols)),
                      shape=((n + 1) ** 2, (n + 1) ** 2)).tocsr()
    b = np.zeros((n + 1) ** 2)
    np.add.at(b, conn.ravel(), Fcell.ravel())

    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    interior = ((ii > 0) & (ii < n) & (jj > 0) & (jj < n)).ravel()
    free = np.flatnonzero(interior)
    Sff = S[free][:, free]
    bf = b[free]

    x, iters, rel = _pcg_jacobi(Sff, bf, rtol=1e-10, maxiter=50 * n)
    if rel > 1e-10:
        raise RefSolveError(
            f"CG stalled after {iters} iterations, relative residual {rel:.3e}"
        )
    vals = np.zeros((n + 1) ** 2)
    vals[free] = x
    return Q1Solution((ivx, ivy), n, vals.reshape(n + 1, n + 1))


def _pcg_jacobi(A, b, rtol: float, maxiter: int):
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= rtol:
            return x, it, rel
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, np.linalg.norm(r) / bnorm


# -- error norms ---------------------------------------------------------------

def error_norms_1d(candidate: Callable, reference: P1Solution,
                   candidate_grad: Optional[Callable] = None) -> ErrorReport:
    """Elementwise 4-point Gauss; reference interpolated P1, candidate exact."""
    mesh = reference.mesh
    h = mesh.h
    xg, wg = _GAUSS4
    xs = (mesh.nodes[:-1, None] + h * xg[None, :]).ravel()
    t = np.tile(xg, mesh.n_el)
    uh = (np.repeat(reference.values[:-1], xg.size) * (1 - t)
          + np.repeat(reference.values[1:], xg.size) * t)
    w = np.tile(h * wg, mesh.n_el)
    uc = np.asarray(candidate(xs), dtype=float)
    abs_l2 = float(np.sqrt((w * (uc - uh) ** 2).sum()))
    ref_l2 = float(np.sqrt((w * uh ** 2).sum()))
    rep = ErrorReport(abs_l2, abs_l2 / ref_l2 if ref_l2 > 0 else np.inf)
    if candidate_grad is not None:
        duh = np.repeat(np.diff(reference.values) / h, xg.size)
        duc = np.asarray(candidate_grad(xs), dtype=float)
        abs_h1 = float(np.sqrt((w * (duc - duh) ** 2).sum()))
        ref_h1 = float(np.sqrt((w * duh ** 2).sum()))
        rep.abs_h1 = abs_h1
        rep.rel_h1 = abs_h1 / ref_h1 if ref_h1 > 0 else np.inf
    return rep


def error_norms_2d(candidate: Callable, reference: Q1Solution,
                   candidate_grad: Optional[Callable] = None) -> ErrorReport:
    """Cellwise 2x2 Gauss; reference bilinear, candidate evaluated at points."""
    n = reference.n
    ivx, ivy = reference.domain
    hx, hy = ivx.length / n, ivy.length / n
    xi, eta, wts, N, dN_dxi, dN_deta = _q1_reference_data()
    xs = np.linspace(ivx.lo, ivx.hi, n + 1)
    ys = np.linspace(ivy.lo, ivy.hi, n + 1)
    x0 = np.repeat(xs[:-1], n)
    y0 = np.tile(ys[:-1], n)
    gp = np.empty((n * n, wts.size, 2))
    gp[:, :, 0] = x0[:, None] + hx * xi[None, :]
    gp[:, :, 1] = y0[:, None] + hy * eta[None, :]

    V = reference.values
    ix = np.repeat(np.arange(n), n)
    iy = np.tile(np.arange(n), n)
    corner = np.stack([V[ix, iy], V[ix + 1, iy], V[ix, iy + 1], V[ix + 1, iy + 1]], axis=1)
    uh = corner @ N.T  # (ncell, ngauss)
    w = wts * hx * hy

    uc = np.asarray(candidate(gp.reshape(-1, 2)), dtype=float).reshape(uh.shape)
    abs_l2 = float(np.sqrt(((uc - uh) ** 2 @ w).sum()))
    ref_l2 = float(np.sqrt((uh ** 2 @ w).sum()))
    rep = ErrorReport(abs_l2, abs_l2 / ref_l2 if ref_l2 > 0 else np.inf)
    if candidate_grad is not None:
        duh_x = corner @ (dN_dxi / hx).T
        duh_y = corner @ (dN_deta / hy).T
        g = np.asarray(candidate_grad(gp.reshape(-1, 2)), dtype=float)
        gx = g[:, 0].reshape(uh.shape)
        gy = g[:, 1].reshape(uh.shape)
        err2 = ((gx - duh_x) ** 2 + (gy - duh_y) ** 2) @ w
        ref2 = (duh_x ** 2 + duh_y ** 2) @ w
        abs_h1 = float(np.sqrt(err2.sum()))
        ref_h1 = float(np.sqrt(ref2.sum()))
        rep.abs_h1 = abs_h1
        rep.rel_h1 = abs_h1 / ref_h1 if ref_h1 > 0 else np.inf
    return rep


def error_norms(candidate, reference, candidate_grad=None) -> ErrorReport:
    if isinstance(reference, P1Solution):
        return error_norms_1d(candidate, reference, candidate_grad)
    if isinstance(reference, Q1Solution):
        return error_norms_2d(candidate, reference, candidate_grad)
    raise TypeError(f"unsupported reference type {type(reference)!r}")


# -- on-disk reference cache ----------------------------------------------------
# Layout: 8-byte magic, little-endian int64 ndim, int64 sizes, float64 payload.

_MAGIC = b"TENSHREF"


def save_reference(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.tobytes())


def load_reference(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise RefSolveError(f"{path} is not a reference cache file")
        (ndim,) = struct.unpack("<q", fh.read(8))
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape).copy()


def reference_cache_key(problem: str, eps: float, mesh: int) -> str:
    return f"{problem}_eps{eps:.6g}_n{mesh}.ref"

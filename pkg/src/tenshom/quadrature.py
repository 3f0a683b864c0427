"""Composite Gauss-Legendre rules and the tensor-product integration grid.

Every inner product in the pipeline is a quadrature sum on one of these rules,
so exactness here (polynomials up to degree 2*n_pts - 1 per subinterval) is
what makes the separable contractions trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAX_GAUSS_POINTS = 64


@dataclass(frozen=True)
class Interval1D:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ConfigError(f"interval endpoints must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ConfigError(f"interval needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo


def legendre_rule(n_pts: int):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].

    Newton iteration on the three-term recurrence from Chebyshev-type initial
    guesses, tolerance 1e-15; weights via w = 2 / ((1 - x^2) P_n'(x)^2).
    Nodes and weights are symmetrized exactly about 0 before returning.
    """
    if not 1 <= n_pts <= MAX_GAUSS_POINTS:
        raise ConfigError(f"Gauss point count must be in [1, {MAX_GAUSS_POINTS}], got {n_pts}")
    k = np.arange(n_pts)
    x = np.cos(np.pi * (4.0 * k + 3.0) / (4.0 * n_pts + 2.0))

    def _poly_pair(x):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for m in range(2, n_pts + 1):
            p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
        return p0, p1

    for _ in range(100):
        p0, p1 = _poly_pair(x)
        dp = n_pts * (x * p1 - p0) / (x * x - 1.0)
        dx = p1 / dp
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    else:
        raise RuntimeError(f"Legendre root Newton iteration stalled for n_pts={n_pts}")

    x = np.sort(x)
    x = 0.5 * (x - x[::-1])
    p0, p1 = _poly_pair(x)
    dp = n_pts * (x * p1 - p0) / (x * x - 1.0) if n_pts > 1 else np.ones_like(x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    w = 0.5 * (w + w[::-1])
    return x, w


@dataclass(frozen=True, eq=False)
class CompositeGaussRule:
    """Gauss-Legendre points replicated over n_sub equal subintervals."""

    interval: Interval1D
    n_sub: int
    n_pts: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def length(self) -> float:
        return self.interval.length


def build_gauss_rule(interval: Interval1D, n_sub: int, n_pts: int) -> CompositeGaussRule:
    if n_sub < 1:
        raise ConfigError(f"need at least one subinterval, got {n_sub}")
    xi, wi = legendre_rule(n_pts)
    h = interval.length / n_sub
    mids = interval.lo + h * (np.arange(n_sub) + 0.5)
    nodes = (mids[:, None] + 0.5 * h * xi[None, :]).ravel()
    weights = np.broadcast_to(0.5 * h * wi, (n_sub, n_pts)).ravel().copy()

    total = weights.sum()
    if abs(total - interval.length) > 1e-13 * abs(interval.length):
        raise RuntimeError(f"weight sum {total} drifted from interval length {interval.length}")
    if not (np.all(np.diff(nodes) > 0) and nodes[0] > interval.lo and nodes[-1] < interval.hi):
        raise RuntimeError("composite nodes not strictly increasing inside the interval")
    return CompositeGaussRule(interval, n_sub, n_pts, nodes, weights)


def integrate_1d(rule: CompositeGaussRule, samples) -> float:
    samples = np.asarray(samples, dtype=float)
    if samples.shape != rule.nodes.shape:
        raise ValueError(f"samples shape {samples.shape} does not match rule size {rule.size}")
    return float(rule.weights @ samples)


@dataclass(frozen=True)
class DimTag:
    """Identifies one grid dimension: scale 0 is slow (x), scale k >= 1 is the
    k-th fast group (y_k)."""

    scale: int
    axis: int

    @property
    def label(self) -> str:
        if self.scale == 0:
            return f"x{self.axis + 1}"
        return f"y{self.scale}_{self.axis + 1}"


@dataclass(frozen=True, eq=False)
class TensorGrid:
    """Ordered per-dimension composite rules; dim index = position in `rules`."""

    rules: tuple
    tags: tuple

    def __post_init__(self):
        if len(self.rules) != len(self.tags):
            raise ConfigError("one tag per rule required")
        for tag, rule in zip(self.tags, self.rules):
            if tag.scale >= 1 and not (
                abs(rule.interval.lo) < 1e-15 and abs(rule.interval.hi - 1.0) < 1e-15
            ):
                raise ConfigError(f"fast dim {tag.label} must cover [0, 1]")

    @property
    def ndim(self) -> int:
        return len(self.rules)

    def nodes(self, dim: int) -> np.ndarray:
        return self.rules[dim].nodes

    def weights(self, dim: int) -> np.ndarray:
        return self.rules[dim].weights

    def length(self, dim: int) -> float:
        return self.rules[dim].length

    def dims_of_scale(self, scale: int):
        return tuple(i for i, t in enumerate(self.tags) if t.scale == scale)

    def dims_up_to_scale(self, scale: int):
        return tuple(i for i, t in enumerate(self.tags) if t.scale <= scale)

    @property
    def n_scales(self) -> int:
        return 1 + max(t.scale for t in self.tags)


def build_grid(domain, d: int, K: int, quad_spec) -> TensorGrid:
    """Grid over Omega x Y_1 x ... x Y_K with (K+1)*d dimensions.

    domain: list of d Interval1D for the slow axes.
    quad_spec: (n_sub, n_pts) used everywhere, or a dict mapping scale -> pair.
    """
    if len(domain) != d:
        raise ConfigError(f"domain needs {d} intervals, got {len(domain)}")
    rules = []
    tags = []
    for scale in range(K + 1):
        if isinstance(quad_spec, dict):
            n_sub, n_pts = quad_spec.get(scale, quad_spec[max(quad_spec)])
        else:
            n_sub, n_pts = quad_spec
        for axis in range(d):
            iv = domain[axis] if scale == 0 else Interval1D(0.0, 1.0)
            rules.append(build_gauss_rule(iv, n_sub, n_pts))
            tags.append(DimTag(scale, axis))
    return TensorGrid(tuple(rules), tuple(tags))

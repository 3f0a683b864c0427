"""Tensor neural network ansatz.

One sine-activated subnetwork per dimension (periodic dims get a frozen
first layer of integer multiples of 2*pi), rank-p assembly with per-factor
L2 normalization computed on the quadrature grid, and the constraint
wrappers: mean-zero over fast dims and the separable Dirichlet cutoff.
"""

from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffengine as de
from .diffengine import ParamVector, Tensor, forward_channels, val
from .errors import ConfigError, DegenerateFactorError
from .quadrature import TensorGrid
from .separable import (
    Factor1D,
    FactorTable,
    SeparableFunction,
    SubnetBank,
    broadcast_to_dims,
    combine,
    multiply,
    partial_integrate,
    tabulate_terms,
)

TWO_PI = 2.0 * np.pi
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class SubnetworkSpec:
    """Hidden widths, sine activation throughout; output width is the model rank p.

    For periodic subnets the first-layer weights are frozen to 2*pi*k for the
    listed integer frequencies (default 1..widths[0]) and only its biases train.
    """

    widths: tuple = (20, 20)
    periodic: bool = False
    frequencies: Optional[tuple] = None

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"hidden widths must be >= 1, got {self.widths}")

    def resolved_frequencies(self):
        if not self.periodic:
            return None
        if self.frequencies is not None:
            return tuple(int(k) for k in self.frequencies)
        # Base frequency for every first-layer unit: higher harmonics arise
        # through the sine compositions of the deeper layers with analytically
        # decaying amplitudes, which keeps the strong-form loss well
        # conditioned. Explicit harmonic ladders can be configured per dim.
        return (1,) * self.widths[0]

    def effective_widths(self):
        if self.periodic:
            return (len(self.resolved_frequencies()),) + tuple(self.widths[1:])
        return tuple(self.widths)


class Subnetwork:
    """Maps one coordinate to p factor values; holds the parameter leaves."""

    def __init__(self, spec: SubnetworkSpec, p: int, rng: np.random.Generator):
        self.spec = spec
        self.p = p
        widths = spec.effective_widths()
        sizes = [1, *widths, p]
        self.layers = []
        for l, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            activate = l < len(widths)
            if l == 0 and spec.periodic:
                freqs = np.asarray(spec.resolved_frequencies(), dtype=float)
                W = Tensor(TWO_PI * freqs[:, None])  # frozen, excluded from params
                b = de.leaf(rng.uniform(0.0, TWO_PI, size=nout))
                trainable_w = False
            else:
                s = np.sqrt(1.0 / nin)
                W = de.leaf(rng.uniform(-s, s, size=(nout, nin)))
                b = de.leaf(rng.uniform(-s, s, size=nout))
                trainable_w = True
            self.layers.append((W, b, activate, trainable_w))

    def channels(self, nodes: np.ndarray, order: int = 2):
        pts = np.mod(nodes, 1.0) if self.spec.periodic else np.asarray(nodes, dtype=float)
        return forward_channels([(W, b, act) for W, b, act, _ in self.layers], pts, order)

    def trainables(self, prefix: str):
        out = []
        for l, (W, b, _, trainable_w) in enumerate(self.layers):
            if trainable_w:
                out.append((f"{prefix}.L{l}.W", W))
            out.append((f"{prefix}.L{l}.b", b))
        return out


class TnnModel:
    """d one-dimensional subnetworks plus the rank-p scaling coefficients c."""

    def __init__(self, dims, subnets, c, p, seed, dim_specs):
        self.dims = tuple(dims)
        self.subnets = subnets
        self.c = c
        self.p = p
        self.seed = seed
        self.dim_specs = dim_specs

    def params(self) -> ParamVector:
        entries = []
        for dim in self.dims:
            entries.extend(self.subnets[dim].trainables(f"subnet{dim}"))
        entries.append(("c", self.c))
        return ParamVector(entries)


def init_model(dim_specs: dict, p: int, seed: int) -> TnnModel:
    """dim_specs: global dim index -> SubnetworkSpec; draws are seed-reproducible."""
    if p < 1:
        raise ConfigError(f"rank p must be >= 1, got {p}")
    rng = np.random.default_rng(seed)
    subnets = {}
    for dim in sorted(dim_specs):
        subnets[dim] = Subnetwork(dim_specs[dim], p, rng)
    c = de.leaf(np.full(p, 1.0 / np.sqrt(p)))
    return TnnModel(sorted(dim_specs), subnets, c, p, seed, dict(dim_specs))


def eval_factor_tables(
    model: TnnModel,
    grid: TensorGrid,
    order: int = 2,
    slow_order: Optional[int] = None,
    traced: bool = True,
) -> SeparableFunction:
    """Sample normalized factors (and derivative channels) at the grid nodes.

    Norms are recomputed from the quadrature rule at every call and divide all
    channels; with traced=True the whole computation is on the tape so
    gradients account for the normalization. With traced=False the tables are
    plain arrays and each dimension gets a point-evaluation bank frozen at the
    current parameters.
    """
    factors = {}
    ctx = nullcontext() if traced else de.no_grad()
    with ctx:
        for dim in model.dims:
            rule = grid.rules[dim]
            tag = grid.tags[dim]
            o = order if (slow_order is None or tag.scale >= 1) else min(order, slow_order)
            u, du, d2u = model.subnets[dim].channels(rule.nodes, o)
            nsq = (u * u * rule.weights).sum(axis=1)
            norms = de.sqrt(nsq)
            nv = val(norms)
            if np.any(nv < NORM_FLOOR):
                j = int(np.argmin(nv))
                raise DegenerateFactorError(
                    f"factor norm {nv[j]:.3e} below {NORM_FLOOR} (dim {dim}, rank {j}); "
                    "restart with a different seed"
                )
            if traced:
                inv = norms.reshape(model.p, 1)
                tab = FactorTable(
                    dim,
                    u / inv,
                    du / inv if du is not None else None,
                    d2u / inv if d2u is not None else None,
                    None,
                )
            else:
                tab = FactorTable(
                    dim,
                    val(u) / nv[:, None],
                    val(du) / nv[:, None] if du is not None else None,
                    val(d2u) / nv[:, None] if d2u is not None else None,
                    SubnetBank(model.subnets[dim], nv.copy()),
                )
            factors[dim] = tab
    coeffs = model.c if traced else val(model.c).copy()
    return SeparableFunction(grid, coeffs, factors)


def apply_mean_zero(psi: SeparableFunction, fast_dims) -> SeparableFunction:
    """psi minus its fast-dim average, broadcast back (rank doubles).

    The subtracted part is constant in the fast dims, so its fast derivative
    tables are identically zero and the result integrates to zero over the
    fast group at every slow-node combination.
    """
    fast_dims = tuple(sorted(fast_dims))
    if not fast_dims:
        raise ValueError("mean-zero wrapper needs a nonempty fast dimension set")
    mean = partial_integrate(psi, fast_dims)
    return combine([(1.0, psi), (-1.0, broadcast_to_dims(mean, psi.dims))])


@dataclass
class DirichletMask:
    """Separable cutoff g(x) = prod g_i(x_i), zero on the boundary only."""

    factors: dict  # slow dim index -> Factor1D with d1 and d2


def sine_mask(grid: TensorGrid, dims) -> DirichletMask:
    """Default cutoff g_i(x) = sin(pi (x - a_i) / (b_i - a_i))."""
    facs = {}
    for dim in dims:
        iv = grid.rules[dim].interval
        om = np.pi / iv.length
        lo = iv.lo
        facs[dim] = Factor1D(
            lambda t, om=om, lo=lo: np.sin(om * (np.asarray(t, dtype=float) - lo)),
            lambda t, om=om, lo=lo: om * np.cos(om * (np.asarray(t, dtype=float) - lo)),
            lambda t, om=om, lo=lo: -om * om * np.sin(om * (np.asarray(t, dtype=float) - lo)),
        )
    return DirichletMask(facs)


def apply_dirichlet_mask(phi: SeparableFunction, mask: DirichletMask) -> SeparableFunction:
    if set(mask.factors) != set(phi.dims):
        raise ValueError(f"mask dims {sorted(mask.factors)} must equal function dims {phi.dims}")
    cutoff = tabulate_terms(phi.grid, [(1.0, mask.factors)], order=2)
    return multiply(phi, cutoff)


# -- checkpointing -------------------------------------------------------------

CHECKPOINT_FORMAT = "tenshom-tnn-1"


def checkpoint_doc(model: TnnModel) -> dict:
    params = model.params()
    return {
        "format": CHECKPOINT_FORMAT,
        "seed": model.seed,
        "p": model.p,
        "dims": list(model.dims),
        "subnets": {
            str(dim): {
                "widths": list(spec.widths),
                "periodic": spec.periodic,
                "frequencies": None
                if spec.frequencies is None
                else list(spec.frequencies),
            }
            for dim, spec in model.dim_specs.items()
        },
        "layout": [
            {"name": name, "shape": list(shape), "offset": off}
            for name, shape, off in params.layout()
        ],
        "values": params.flatten().tolist(),
    }


def save_checkpoint(model: TnnModel, path):
    with open(path, "w") as fh:
        json.dump(checkpoint_doc(model), fh)


def model_from_doc(doc: dict) -> TnnModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unknown checkpoint format {doc.get('format')!r}")
    specs = {
        int(dim): SubnetworkSpec(
            widths=tuple(sub["widths"]),
            periodic=bool(sub["periodic"]),
            frequencies=None if sub["frequencies"] is None else tuple(sub["frequencies"]),
        )
        for dim, sub in doc["subnets"].items()
    }
    model = init_model(specs, int(doc["p"]), int(doc["seed"]))
    model.params().assign(np.array(doc["values"], dtype=np.float64))
    return model


def load_checkpoint(path) -> TnnModel:
    with open(path) as fh:
        return model_from_doc(json.load(fh))

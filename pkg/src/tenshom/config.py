"""Pipeline configuration: JSON parsing, validation, round-trip serialization,
and the user-coefficient grammar (sums of named 1D primitives per term)."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .coeffs import BuiltinProblem, CoeffTerm, TensorCoefficient, builtin, PRIMITIVES
from .errors import ConfigError
from .quadrature import Interval1D, TensorGrid, build_grid
from .training import TrainConfig

_DIM_RE = re.compile(r"^(?:x(\d*)|y(\d+)(?:_(\d+))?)$")


def parse_dim_label(label: str, d: int) -> int:
    """Accepts x, x1, x2, y1, y2, y1_1, y1_2 ...; returns the global dim index."""
    m = _DIM_RE.match(label.strip())
    if not m:
        raise ConfigError(f"cannot parse dimension label {label!r}")
    if m.group(1) is not None:
        axis = int(m.group(1)) - 1 if m.group(1) else 0
        scale = 0
    else:
        scale = int(m.group(2))
        axis = int(m.group(3)) - 1 if m.group(3) else 0
    if not 0 <= axis < d:
        raise ConfigError(f"axis out of range in dimension label {label!r} (d={d})")
    return scale * d + axis


def _parse_factor(doc: dict):
    kind = doc.get("kind")
    if kind not in PRIMITIVES:
        raise ConfigError(f"unknown factor kind {kind!r}; choose from {sorted(PRIMITIVES)}")
    if kind in ("sin_freq", "cos_freq"):
        return PRIMITIVES[kind](
            float(doc.get("freq", 1.0)),
            scale_2pi=bool(doc.get("scale_2pi", True)),
            shift=float(doc.get("shift", 0.0)),
        )
    if kind == "const":
        return PRIMITIVES[kind](float(doc.get("value", 1.0)))
    return PRIMITIVES[kind](list(doc.get("coeffs", [0.0])))


def _parse_terms(docs, d: int):
    terms = []
    for t in docs:
        facs = {parse_dim_label(lbl, d): _parse_factor(f)
                for lbl, f in t.get("factors", {}).items()}
        terms.append(CoeffTerm(float(t.get("scale", 1.0)), facs))
    return terms


def problem_from_dict(doc: dict) -> BuiltinProblem:
    """A user-defined problem: domain, separable coefficient, separable source."""
    try:
        d = int(doc["d"])
        K = int(doc["K"])
        domain = [Interval1D(float(lo), float(hi)) for lo, hi in doc["domain"]]
        gamma = float(doc.get("gamma", 0.1))
        entries_doc = doc["coefficient"]
    except KeyError as exc:
        raise ConfigError(f"user problem is missing field {exc}") from exc
    if len(domain) != d:
        raise ConfigError(f"domain needs {d} intervals")
    if isinstance(entries_doc, list):  # scalar-times-identity shorthand
        terms = _parse_terms(entries_doc, d)
        entries = {(i, i): terms for i in range(d)}
    else:
        entries = {}
        for key, tdocs in entries_doc.items():
            i, j = (int(s) for s in key.split(","))
            entries[(i, j)] = _parse_terms(tdocs, d)
    coeff = TensorCoefficient(d, K, entries, gamma)
    source_terms = [(t.scale, t.factors) for t in _parse_terms(doc.get("source", []), d)]
    return BuiltinProblem(str(doc.get("name", "custom")), d, K, domain, coeff, source_terms)


def _train_from_dict(doc: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        optimizer=doc.get("optimizer", "adam"),
        lr_adam=float(doc.get("lr_adam", 0.01)),
        steps_adam=int(doc.get("steps_adam", 5000)),
        lr_lbfgs=float(doc.get("lr_lbfgs", 0.1)),
        steps_lbfgs=int(doc.get("steps_lbfgs", 0)),
        history=int(doc.get("history", 10)),
        seed=int(doc.get("seed", seed)),
        p=int(doc.get("p", 10)),
        widths=tuple(doc.get("widths", (20, 20))),
        log_every=int(doc.get("log_every", 100)),
    )


def _train_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["widths"] = list(cfg.widths)
    return out


@dataclass
class FemConfig:
    n_el_1d_min: int = 16384       # floor on top of the 64/eps rule
    n_2d_min: int = 256            # floor on top of the 32/eps rule
    n_2d_cap: int = 2048
    cell_n_el: int = 4096
    macro_ref_n_el: int = 8192     # u0 reference mesh (1D)


@dataclass
class PipelineConfig:
    problem: object                 # builtin name (str) or user problem dict
    eps_list: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    grid: dict = field(default_factory=lambda: {"n_sub": 40, "n_pts": 16})
    cell: list = field(default_factory=list)     # TrainConfig per stage, finest first
    macro: Optional[TrainConfig] = None
    fem: FemConfig = field(default_factory=FemConfig)
    out_dir: str = "out"
    seed: int = 0
    deterministic: bool = False
    threads: Optional[int] = None

    def resolve_problem(self) -> BuiltinProblem:
        if isinstance(self.problem, str):
            return builtin(self.problem)
        return problem_from_dict(self.problem)

    def build_grid(self, prob: BuiltinProblem) -> TensorGrid:
        g = self.grid
        if "n_sub" in g:
            spec = (int(g["n_sub"]), int(g["n_pts"]))
        else:
            spec = {int(k): (int(v["n_sub"]), int(v["n_pts"])) for k, v in g.items()}
        return build_grid(prob.domain, prob.d, prob.K, spec)

    def stage_configs(self, K: int):
        if not self.cell:
            cfgs = [TrainConfig(seed=self.seed)] * K
        elif len(self.cell) == 1:
            cfgs = list(self.cell) * K
        elif len(self.cell) == K:
            cfgs = list(self.cell)
        else:
            raise ConfigError(f"need 1 or {K} cell train configs, got {len(self.cell)}")
        return cfgs

    def macro_config(self) -> TrainConfig:
        return self.macro if self.macro is not None else TrainConfig(seed=self.seed)


def config_from_dict(doc: dict) -> PipelineConfig:
    if "problem" not in doc:
        raise ConfigError("config needs a 'problem' (builtin name or problem object)")
    seed = int(doc.get("seed", 0))
    eps_list = [float(e) for e in doc.get("eps_list", [0.2, 0.1, 0.05])]
    for e in eps_list:
        if not 0.0 < e < 1.0:
            raise ConfigError(f"eps values must lie in (0, 1), got {e}")
    cell_doc = doc.get("cell", [])
    if isinstance(cell_doc, dict):
        cell_doc = [cell_doc]
    fem_doc = doc.get("fem", {})
    known = {"problem", "eps_list", "grid", "cell", "macro", "fem", "out_dir",
             "seed", "deterministic", "threads"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return PipelineConfig(
        problem=doc["problem"],
        eps_list=eps_list,
        grid=dict(doc.get("grid", {"n_sub": 40, "n_pts": 16})),
        cell=[_train_from_dict(c, seed) for c in cell_doc],
        macro=_train_from_dict(doc["macro"], seed) if "macro" in doc else None,
        fem=FemConfig(**fem_doc),
        out_dir=str(doc.get("out_dir", "out")),
        seed=seed,
        deterministic=bool(doc.get("deterministic", False)),
        threads=None if doc.get("threads") is None else int(doc["threads"]),
    )


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "problem": cfg.problem,
        "eps_list": list(cfg.eps_list),
        "grid": dict(cfg.grid),
        "cell": [_train_to_dict(c) for c in cfg.cell],
        **({"macro": _train_to_dict(cfg.macro)} if cfg.macro is not None else {}),
        "fem": asdict(cfg.fem),
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "threads": cfg.threads,
    }


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc)

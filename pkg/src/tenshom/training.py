"""Optimizer loops shared by the cell and macro stages.

The objective callable rebuilds the squared-residual tape from the current
leaf values; histories record the root (the loss as defined), while updates
use the squared value, which keeps gradients bounded near zero loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffengine as de
from .diffengine import ParamVector
from .errors import ConfigError, TrainingError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ARMIJO_C1 = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX_BACKTRACKS = 30
CURVATURE_FLOOR = 1e-12


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "adam" | "adam_then_lbfgs"
    lr_adam: float = 0.01
    steps_adam: int = 5000
    lr_lbfgs: float = 0.1
    steps_lbfgs: int = 0
    history: int = 10  # LBFGS memory
    seed: int = 0
    p: int = 10
    widths: tuple = (20, 20)
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in ("adam", "adam_then_lbfgs"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_adam <= 0 or self.lr_lbfgs <= 0:
            raise ConfigError("learning rates must be positive")
        if self.steps_adam < 0 or self.steps_lbfgs < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.p < 1:
            raise ConfigError("rank p must be >= 1")


@dataclass
class HistoryRow:
    step: int
    loss: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainResult:
    best_loss: float
    best_flat: np.ndarray
    history: list
    status: str  # "ok" | "aborted_nonfinite"
    steps_run: int


def _root(sq: float) -> float:
    return float(np.sqrt(max(sq, 0.0)))


def run_training(
    objective: Callable[[], de.Tensor],
    params: ParamVector,
    config: TrainConfig,
    on_checkpoint: Optional[Callable[[int], None]] = None,
) -> TrainResult:
    """Adam (bias-corrected) then optional LBFGS with Armijo backtracking.

    Returns the best-loss parameters seen; on exit the leaves hold them.
    A non-finite loss at the very first evaluation raises TrainingError;
    later non-finite values abort the run with the last good checkpoint.
    """
    t0 = time.perf_counter()
    history: list = []
    flat = params.flatten()
    best_loss = np.inf
    best_flat = flat.copy()
    status = "ok"
    steps_run = 0

    def elapsed_ms() -> float:
        return (time.perf_counter() - t0) * 1e3

    def note_best(root: float):
        nonlocal best_loss, best_flat
        if root < best_loss:
            best_loss = root
            best_flat = params.flatten()

    def eval_value(x: np.ndarray) -> float:
        params.assign(x)
        with de.no_grad():
            return float(objective().value)

    def eval_grad() -> tuple:
        sq = objective()
        g = de.gradient(sq, params)
        return float(sq.value), g

    # -- Adam phase ---------------------------------------------------------
    b1, b2 = ADAM_BETAS
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    first = True
    for step in range(config.steps_adam):
        try:
            sq, g = eval_grad()
        except TrainingError:
            if first:
                raise
            status = "aborted_nonfinite"
            break
        first = False
        root = _root(sq)
        note_best(root)
        if step % config.log_every == 0:
            history.append(HistoryRow(step, root, float(np.linalg.norm(g)), elapsed_ms()))
            if on_checkpoint is not None:
                on_checkpoint(step)
        t = step + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        flat = flat - config.lr_adam * mhat / (np.sqrt(vhat) + ADAM_EPS)
        params.assign(flat)
        steps_run += 1

    # -- LBFGS phase ----------------------------------------------------------
    if status == "ok" and config.optimizer == "adam_then_lbfgs" and config.steps_lbfgs > 0:
        pairs: list = []
        try:
            sq, g = eval_grad()
        except TrainingError:
            if first:
                raise
            sq, g = None, None
            status = "aborted_nonfinite"
        if status == "ok":
            f0 = sq
            note_best(_root(f0))
            for it in range(config.steps_lbfgs):
                d = _two_loop_direction(g, pairs)
                if g @ d >= 0.0:
                    pairs.clear()
                    d = -g
                alpha, f_new = _armijo(eval_value, flat, d, f0, g, config.lr_lbfgs)
                if alpha is None and pairs:
                    pairs.clear()
                    d = -g
                    alpha, f_new = _armijo(eval_value, flat, d, f0, g, config.lr_lbfgs)
                if alpha is None:
                    params.assign(flat)  # line search exhausted: stationary enough
                    break
                step_vec = alpha * d
                flat = flat + step_vec
                params.assign(flat)
                try:
                    f_new_g, g_new = eval_grad()
                except TrainingError:
                    status = "aborted_nonfinite"
                    break
                y = g_new - g
                sy = float(step_vec @ y)
                if sy > CURVATURE_FLOOR * np.linalg.norm(step_vec) * np.linalg.norm(y):
                    pairs.append((step_vec, y))
                    if len(pairs) > config.history:
                        pairs.pop(0)
                f0, g = f_new_g, g_new
                steps_run += 1
                root = _root(f0)
                note_best(root)
                if it % config.log_every == 0:
                    history.append(
                        HistoryRow(config.steps_adam + it, root,
                                   float(np.linalg.norm(g)), elapsed_ms())
                    )
                    if on_checkpoint is not None:
                        on_checkpoint(config.steps_adam + it)

    # final evaluation at the last iterate, then restore the best parameters
    if status == "ok":
        try:
            final = eval_value(flat)
            note_best(_root(final))
        except TrainingError:
            status = "aborted_nonfinite"
    params.assign(best_flat)
    history.append(HistoryRow(steps_run, best_loss, np.nan, elapsed_ms()))
    if on_checkpoint is not None:
        on_checkpoint(steps_run)
    return TrainResult(best_loss, best_flat, history, status, steps_run)


def _two_loop_direction(g: np.ndarray, pairs: list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((a, rho, s, y))
    if pairs:
        s, y = pairs[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _armijo(eval_value, x0, d, f0, g, alpha0):
    """Backtracking line search on the squared loss; returns (alpha, f) or (None, None)."""
    slope = float(g @ d)
    alpha = alpha0
    for _ in range(ARMIJO_MAX_BACKTRACKS):
        f = eval_value(x0 + alpha * d)
        if np.isfinite(f) and f <= f0 + ARMIJO_C1 * alpha * slope:
            return alpha, f
        alpha *= ARMIJO_SHRINK
    return None, None

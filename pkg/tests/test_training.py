import numpy as np
import pytest

from tenshom import diffengine as de
from tenshom.errors import ConfigError, TrainingError
from tenshom.training import TrainConfig, run_training


def quadratic_objective(x, scales):
    def objective():
        shifted = x - de.Tensor(np.zeros(scales.size) + 1.5)
        return ((shifted * scales) * shifted).sum()

    return objective


def test_adam_minimizes_quadratic():
    x = de.leaf(np.zeros(4))
    scales = np.array([1.0, 2.0, 0.5, 4.0])
    params = de.ParamVector([("x", x)])
    cfg = TrainConfig(steps_adam=800, lr_adam=0.05, log_every=200, p=1)
    res = run_training(quadratic_objective(x, scales), params, cfg)
    assert res.status == "ok"
    assert res.best_loss <= 1e-2
    assert np.abs(x.value - 1.5).max() <= 0.05


def test_lbfgs_polishes_quadratic():
    x = de.leaf(np.zeros(4))
    scales = np.array([1.0, 2.0, 0.5, 4.0])
    params = de.ParamVector([("x", x)])
    cfg = TrainConfig(optimizer="adam_then_lbfgs", steps_adam=50, steps_lbfgs=40,
                      lr_adam=0.05, lr_lbfgs=1.0, log_every=25, p=1)
    res = run_training(quadratic_objective(x, scales), params, cfg)
    assert res.best_loss <= 1e-8
    assert np.abs(x.value - 1.5).max() <= 1e-8


def test_history_schema_and_determinism():
    def run_once():
        x = de.leaf(np.array([0.0, 0.0]))
        params = de.ParamVector([("x", x)])
        cfg = TrainConfig(steps_adam=60, lr_adam=0.1, log_every=20, p=1)
        res = run_training(quadratic_objective(x, np.ones(2)), params, cfg)
        return res

    r1, r2 = run_once(), run_once()
    assert [h.loss for h in r1.history] == [h.loss for h in r2.history]
    assert [h.step for h in r1.history] == [0, 20, 40, 60]
    assert all(np.isfinite(h.grad_norm) for h in r1.history[:-1])


def test_best_seen_checkpointing():
    # objective worsens after an initial dip: best parameters must be kept
    t = {"n": 0}
    x = de.leaf(np.array([1.0]))
    params = de.ParamVector([("x", x)])

    def objective():
        t["n"] += 1
        drift = de.Tensor(np.array([0.0 if t["n"] < 10 else 50.0]))
        return ((x + drift) * (x + drift)).sum()

    cfg = TrainConfig(steps_adam=30, lr_adam=0.2, log_every=10, p=1)
    res = run_training(objective, params, cfg)
    assert res.best_loss <= abs(x.value[0] + 50.0)  # best kept from the early phase


def test_nonfinite_first_step_raises():
    x = de.leaf(np.array([1.0]))
    params = de.ParamVector([("x", x)])

    def objective():
        return (x / de.Tensor(np.zeros(1))).sum()

    with pytest.raises(TrainingError):
        run_training(objective, params, TrainConfig(steps_adam=5, p=1))


def test_nonfinite_midway_aborts_with_best():
    calls = {"n": 0}
    x = de.leaf(np.array([1.0]))
    params = de.ParamVector([("x", x)])

    def objective():
        calls["n"] += 1
        if calls["n"] > 5:
            return (x * de.Tensor(np.array([np.nan]))).sum()
        return (x * x).sum()

    cfg = TrainConfig(steps_adam=50, lr_adam=0.05, log_every=10, p=1)
    res = run_training(objective, params, cfg)
    assert res.status == "aborted_nonfinite"
    assert np.isfinite(res.best_loss)
    assert np.array_equal(params.flatten(), res.best_flat)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(lr_adam=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(steps_adam=-1)
    with pytest.raises(ConfigError):
        TrainConfig(p=0)


def test_checkpoint_callback_cadence():
    x = de.leaf(np.array([0.5]))
    params = de.ParamVector([("x", x)])
    seen = []
    cfg = TrainConfig(steps_adam=45, lr_adam=0.05, log_every=20, p=1)
    run_training(quadratic_objective(x, np.ones(1)), params, cfg,
                 on_checkpoint=lambda step: seen.append(step))
    assert seen == [0, 20, 40, 45]

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tenshom.cli import main
from tenshom.config import (
    config_from_dict,
    config_to_dict,
    load_config,
    parse_dim_label,
    problem_from_dict,
)
from tenshom.errors import ConfigError


def minimal_doc(out_dir):
    return {
        "problem": "ex_1D",
        "eps_list": [0.2, 0.1],
        "grid": {"n_sub": 4, "n_pts": 6},
        "cell": [{"steps_adam": 25, "p": 2, "widths": [4, 4], "log_every": 10}],
        "macro": {"steps_adam": 25, "p": 2, "widths": [4, 4], "log_every": 10},
        "fem": {"n_el_1d_min": 512, "macro_ref_n_el": 512},
        "out_dir": str(out_dir),
        "seed": 3,
    }


def test_config_roundtrip_identity(tmp_path):
    doc = minimal_doc(tmp_path)
    cfg1 = config_from_dict(doc)
    doc2 = config_to_dict(cfg1)
    cfg2 = config_from_dict(doc2)
    assert config_to_dict(cfg2) == doc2


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError):
        config_from_dict({"problem": "ex_1D", "bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"problem": "ex_1D", "eps_list": [1.5]})
    with pytest.raises(ConfigError):
        config_from_dict({})


def test_dim_label_parsing():
    assert parse_dim_label("x", d=1) == 0
    assert parse_dim_label("x2", d=2) == 1
    assert parse_dim_label("y1", d=1) == 1
    assert parse_dim_label("y2", d=1) == 2
    assert parse_dim_label("y1_2", d=2) == 3
    with pytest.raises(ConfigError):
        parse_dim_label("z1", d=1)
    with pytest.raises(ConfigError):
        parse_dim_label("x3", d=2)


def test_user_problem_grammar_matches_builtin():
    from tenshom.coeffs import builtin

    doc = {
        "name": "ex_1D_clone",
        "d": 1,
        "K": 1,
        "domain": [[0.0, np.pi]],
        "gamma": 0.25,
        "coefficient": [
            {"scale": 0.5, "factors": {"y1": {"kind": "sin_freq", "freq": 1}}},
            {"scale": 1.0, "factors": {"x": {"kind": "sin_freq", "freq": 1, "scale_2pi": False}}},
            {"scale": 2.0, "factors": {}},
        ],
        "source": [
            {"scale": 1.0, "factors": {"x": {"kind": "sin_freq", "freq": 1, "scale_2pi": False}}}
        ],
    }
    prob = problem_from_dict(doc)
    ref = builtin("ex_1D")
    pts = {0: np.linspace(0.1, 3.0, 7), 1: np.linspace(0.05, 0.95, 7)}
    assert np.allclose(
        prob.coeff.evaluate(0, 0, pts), ref.coeff.evaluate(0, 0, pts), atol=1e-15
    )
    x = np.linspace(0.1, 3.0, 5)
    assert np.allclose(prob.source_at(x), ref.source_at(x), atol=1e-15)


def test_user_problem_poly_and_const_factors():
    doc = {
        "d": 1, "K": 1, "domain": [[0.0, 1.0]], "gamma": 0.2,
        "coefficient": [
            {"scale": 1.0, "factors": {"x": {"kind": "poly", "coeffs": [2.0, 1.0]}}},
            {"scale": 1.0, "factors": {"y1": {"kind": "const", "value": 0.5}}},
        ],
    }
    prob = problem_from_dict(doc)
    got = prob.coeff.evaluate(0, 0, {0: np.array([0.5]), 1: np.array([0.3])})
    assert got[0] == pytest.approx(2.5 + 0.5)


def test_cli_quadcheck_and_oracle(capsys):
    assert main(["quadcheck"]) == 0
    out = capsys.readouterr().out
    assert "quadcheck: ok" in out
    assert main(["oracle", "--problem", "ex_1D"]) == 0
    out = capsys.readouterr().out
    assert "oracle: ok" in out
    assert main(["oracle", "--problem", "ex_2D_1"]) == 2


def test_cli_gradcheck_small(capsys):
    assert main(["gradcheck", "--seed", "7", "--models", "4", "--probes", "6"]) == 0
    assert "gradcheck: ok" in capsys.readouterr().out


def test_cli_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    good_doc = {"problem": "no_such_problem"}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(good_doc))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_cli_run_artifacts_and_determinism(tmp_path):
    doc = minimal_doc(tmp_path / "a")
    doc["deterministic"] = True
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["run", "--config", str(cfg_path)]) == 0
    out_a = tmp_path / "a"
    for name in ("config.json", "report.json", "report.txt", "errors_eps.csv",
                 "loss_stage1_dir1.csv", "loss_macro.csv", "model_macro.json",
                 "model_stage1_dir1.json", "homogenized_coefficient.csv",
                 "solution_profile_eps0.2.csv", "gradient_profile_eps0.1.csv"):
        assert (out_a / name).exists(), name
    header = (out_a / "errors_eps.csv").read_text().splitlines()[0]
    assert header == "eps,abs_l2,rel_l2"
    prof_header = (out_a / "solution_profile_eps0.2.csv").read_text().splitlines()[0]
    assert prof_header == "x,u0,u1,u_eps"
    report = json.loads((out_a / "report.json").read_text())
    assert "errors_eps" in report and "stages" in report

    # byte-identical CSVs on rerun with the same seed in deterministic mode
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    for name in ("errors_eps.csv", "loss_stage1_dir1.csv", "loss_macro.csv",
                 "homogenized_coefficient.csv", "solution_profile_eps0.2.csv"):
        assert (out_a / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_cli_stage_subcommands(tmp_path):
    doc = minimal_doc(tmp_path / "s")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["cell", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "s" / "loss_stage1_dir1.csv").exists()
    assert main(["macro", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "s" / "model_macro.json").exists()
    assert main(["reconstruct", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "s" / "solution_profile_eps0.1.csv").exists()


def test_cli_env_out_dir(tmp_path, monkeypatch):
    doc = minimal_doc(tmp_path / "ignored")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    monkeypatch.setenv("TENSHOM_OUT", str(tmp_path / "env_out"))
    assert main(["cell", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "env_out" / "loss_stage1_dir1.csv").exists()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "tenshom.cli", "quadcheck"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "quadcheck: ok" in res.stdout

"""Config validation, presets, metrics, experiment drivers and the CLI."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from graphgames.cli import main
from graphgames.errors import ConfigParseError, ConfigValidationError
from graphgames.experiment import (
    load_config,
    metrics,
    preset_config,
    run_experiment,
    validate_config,
)

from conftest import preset_with


def _minimal_scalar_config(**overrides):
    data = {
        "mode": "cooperative",
        "algorithm": "simulate",
        "topology": {"n_agents": 1, "edges": [], "pins": [1]},
        "dynamics": {"A": [[0.9]], "B": [[[0.5]]], "E": [[[0.3]]]},
        "weights": {"Q": [[[1.0]]], "R_self": [[[1.0]]], "T_self": [[[1.0]]],
                    "attenuation": 3.0},
        "horizon": 50,
    }
    data.update(overrides)
    return data


def test_validate_config_defaults_and_errors():
    cfg = validate_config(_minimal_scalar_config())
    assert cfg.seed == 0
    assert cfg.sync_threshold == 0.05
    assert cfg.critic_prior_safety == 0.9
    assert cfg.actuate_learned_disturbance is False
    with pytest.raises(ConfigValidationError):
        validate_config(_minimal_scalar_config(mode="friendly"))
    with pytest.raises(ConfigValidationError):
        validate_config(_minimal_scalar_config(algorithm="train"))
    with pytest.raises(ConfigValidationError):
        validate_config(_minimal_scalar_config(horizon=0))
    with pytest.raises(ConfigValidationError):
        validate_config(_minimal_scalar_config(unexpected=1))
    bad = _minimal_scalar_config()
    del bad["weights"]
    with pytest.raises(ConfigValidationError):
        validate_config(bad)
    # cross weights must mirror the neighbor structure
    bad = _minimal_scalar_config()
    bad["weights"]["R_cross"] = {"1,2": [[1.0]]}
    bad["weights"]["T_cross"] = {"1,2": [[1.0]]}
    with pytest.raises(ConfigValidationError):
        validate_config(bad)


def test_load_config_reports_parse_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "mode": cooperative\n}\n')
    with pytest.raises(ConfigParseError, match="line 2"):
        load_config(path)
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.json")
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_minimal_scalar_config()))
    assert load_config(good).algorithm == "simulate"


def test_presets_validate_and_differ():
    coop = preset_config("paper-sec5-coop")
    noncoop = preset_config("paper-sec5-noncoop")
    assert coop.mode == "cooperative"
    assert noncoop.mode == "noncooperative"
    assert coop.horizon == 500
    assert coop.build_topology().n_agents == 4
    with pytest.raises(ConfigValidationError):
        preset_config("paper-sec6")


def test_metrics_sync_detection():
    cfg = preset_with("coop", algorithm="simulate", horizon=30)
    model = cfg.build_model()
    weights = cfg.build_weights()
    from graphgames.dynamics import simulate, LinearPolicy
    top = cfg.build_topology()
    # start synchronized: errors are identically zero
    policies = [LinearPolicy(K=np.zeros((1, 2))) for _ in range(4)]
    x0 = np.array([0.4, 0.5])
    log = simulate(model, top, policies, None, [x0.copy() for _ in range(4)],
                   x0, 30)
    out = metrics(log, weights, "cooperative")
    assert out["synchronized"] is True
    assert out["sync_time"] == 0
    assert len(out["per_agent"]) == 4
    assert out["per_agent"][0]["max_error"] == pytest.approx(0.0, abs=1e-12)


def test_simulation_experiment_writes_outputs(tmp_path):
    cfg = validate_config(_minimal_scalar_config())
    out = tmp_path / "sim"
    summary = run_experiment(cfg, out)
    assert set(os.listdir(out)) == {"trajectory.csv", "sync_errors.csv",
                                    "config.json", "summary.json"}
    assert "metrics" in summary
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["metrics"]["synchronized"] == \
        summary["metrics"]["synchronized"]


def test_pi_experiment_scalar(tmp_path):
    cfg = validate_config(_minimal_scalar_config(algorithm="pi_coop"))
    out = tmp_path / "pi"
    summary = run_experiment(cfg, out)
    assert summary["converged"] is True
    assert (out / "pi_result.json").exists()
    assert (out / "pi_history.csv").exists()
    result = json.loads((out / "pi_result.json").read_text())
    K = np.asarray(result["gains"][0]["K"])
    assert K.shape == (1, 1)


def test_verify_experiment(tmp_path):
    cfg = validate_config(_minimal_scalar_config(algorithm="verify"))
    summary = run_experiment(cfg, tmp_path / "verify")
    assert summary["all_passed"] is True
    margins = summary["attenuation_margins"]
    assert len(margins) == 1 and margins[0]["margin"] >= 0.0


def test_learning_experiment_outputs(tmp_path, repro_coop):
    out = repro_coop["_outdir"]
    files = {"trajectory.csv", "weights.csv", "sync_errors.csv",
             "config.json", "summary.json"}
    assert files <= set(os.listdir(out))
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["converged"] is True
    assert "_result" not in on_disk


def test_cli_missing_config_is_validation_error(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["simulate", "--out", str(tmp_path / "o")])
    assert res.exit_code == 2
    res = runner.invoke(main, ["simulate", "--config",
                               str(tmp_path / "nope.json"),
                               "--out", str(tmp_path / "o")])
    assert res.exit_code == 2


def test_cli_simulate_and_verify(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_minimal_scalar_config()))
    runner = CliRunner()
    res = runner.invoke(main, ["simulate", "--config", str(cfg_path),
                               "--out", str(tmp_path / "sim")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "sim" / "trajectory.csv").exists()
    res = runner.invoke(main, ["verify", "--config", str(cfg_path),
                               "--out", str(tmp_path / "ver")])
    assert res.exit_code == 0, res.output


def test_cli_pi_coop_scalar(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_minimal_scalar_config()))
    runner = CliRunner()
    res = runner.invoke(main, ["pi-coop", "--config", str(cfg_path),
                               "--out", str(tmp_path / "pi")])
    assert res.exit_code == 0, res.output
    assert "converged=True" in res.output


def test_cli_convergence_failure_exit_code(tmp_path):
    data = _minimal_scalar_config(algorithm="pi_coop",
                                  gains=[{"K": [[0.0]]}],
                                  tolerances={"max_outer": 1, "eps2": 1e-15})
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(data))
    runner = CliRunner()
    res = runner.invoke(main, ["pi-coop", "--config", str(cfg_path),
                               "--out", str(tmp_path / "pi")])
    assert res.exit_code == 4


@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_divergence_exit_code(tmp_path):
    # unstable fleet with zero-gain simulation from a nonzero start diverges
    data = _minimal_scalar_config()
    data["dynamics"]["A"] = [[1.6]]
    data["x_init"] = [[5.0]]
    data["horizon"] = 3000
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(data))
    runner = CliRunner()
    res = runner.invoke(main, ["simulate", "--config", str(cfg_path),
                               "--out", str(tmp_path / "sim")])
    assert res.exit_code == 3


def test_cli_seed_override_recorded(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_minimal_scalar_config()))
    runner = CliRunner()
    res = runner.invoke(main, ["simulate", "--config", str(cfg_path),
                               "--out", str(tmp_path / "sim"),
                               "--seed", "7"])
    assert res.exit_code == 0
    echoed = json.loads((tmp_path / "sim" / "config.json").read_text())
    assert echoed["seed"] == 7


def test_cli_reproduce_paper_help():
    runner = CliRunner()
    res = runner.invoke(main, ["reproduce-paper", "--help"])
    assert res.exit_code == 0
    assert "coop" in res.output

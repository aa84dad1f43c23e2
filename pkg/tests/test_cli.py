import csv
import json
import math

import pytest

from lppa.cli import main
from lppa.config import ExperimentConfig, config_from_dict, parse_number_list
from lppa.exceptions import ConfigError


def small_config(**over):
    cfg = {
        "schema_version": 1,
        "topology": {"kind": "full", "n": 3},
        "rules": ["dsgt", "dp", "lppa"],
        "beta": 0.1,
        "dataset": {"n_classes": 2, "dim": 3, "n_samples": 150, "separation": 4.0},
        "rounds": 4,
        "seeds": [0, 1],
        "attack": {"iterations": 30, "restarts": 1},
    }
    cfg.update(over)
    return cfg


def write_config(tmp_path, **over):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(small_config(**over)))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    # 2 seeds x 3 rules x (init + 4 rounds) x 3 clients
    assert len(rows) == 2 * 3 * 5 * 3
    assert list(rows[0]) == [
        "seed", "rule", "beta", "round", "client", "loss", "accuracy", "consensus_accuracy",
        "consensus_distance", "tracking_residual", "noise_diff_sum_norm", "diverged",
    ]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["rounds"] == 4 and summary["seeds"] == [0, 1]
    assert summary["rules"]["dsgt"]["loss_pp"] == 0.0
    for r in ("dsgt", "lppa"):
        assert all(float(x["tracking_residual"]) <= 1e-9 for x in rows if x["rule"] == r)
    assert "lppa" in capsys.readouterr().out
    assert not list(out.glob(".*.tmp"))


def test_zero_rounds_only_init_row(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path, rounds=0, rules=["dsgt"], seeds=[0]), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert {r["round"] for r in rows} == {"0"} and len(rows) == 3


def test_rerun_from_echo_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", write_config(tmp_path), "--out", str(a)]) == 0
    assert main(["run", "--config", str(a / "config.resolved.json"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_seeds_flag_overrides(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path, rules=["dsgt"]), "--out", str(out), "--seeds", "7"]) == 0
    assert {r["seed"] for r in read_csv(out / "metrics.csv")} == {"7"}


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv("LPPA_OUTPUT_DIR", str(target))
    assert main(["run", "--config", write_config(tmp_path, rules=["dsgt"], seeds=[0])]) == 0
    assert (target / "metrics.csv").exists()


def test_unknown_key_is_validation_error(tmp_path, capsys):
    assert main(["run", "--config", write_config(tmp_path, betta=0.1)]) == 1
    assert "betta" in capsys.readouterr().err


@pytest.mark.parametrize("over", [
    {"lam": 0.0}, {"rules": ["fedavg"]}, {"schema_version": 2}, {"seeds": []},
    {"topology": {"kind": "star", "n": 3}}, {"beta": -1.0},
])
def test_invalid_values(tmp_path, over):
    assert main(["run", "--config", write_config(tmp_path, **over), "--out", str(tmp_path / "o")]) == 1


def test_missing_files_are_io_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 3
    cfg = write_config(tmp_path, dataset={"source": "csv", "path": str(tmp_path / "none.csv")})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_divergence_exit_code_and_flags(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, rules=["dsgt", "dp"], beta=1e300, lam=1e10, seeds=[0])
    assert main(["run", "--config", cfg, "--out", str(out)]) == 2
    rows = read_csv(out / "metrics.csv")
    dp = [r for r in rows if r["rule"] == "dp" and r["round"] != "0"]
    assert dp and all(r["diverged"] == "1" and r["loss"] == "nan" for r in dp)
    assert all(r["diverged"] == "0" for r in rows if r["rule"] == "dsgt")
    assert json.loads((out / "summary.json").read_text())["rules"]["dp"]["diverged"] == [True]


def test_budget(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, beta=0.25, privacy={"delta_f": 2.0})
    assert main(["budget", "--config", cfg, "--out", str(out), "--t-max", "3"]) == 0
    rows = read_csv(out / "budgets.csv")
    assert len(rows) == 4 * 3
    for r in rows:
        assert abs(float(r["ratio"]) - math.sqrt(2)) <= 1e-12
        # uniform beta on a doubly stochastic W: constant in t
        assert float(r["epsilon_dp"]) == pytest.approx(2.0 / 0.25, rel=1e-12)
    assert all(float(r["epsilon_dp"]) == 2.0 / 0.25 for r in rows if r["round"] == "0")
    meta = json.loads((out / "budget.json").read_text())
    assert meta["sensitivity_source"] == "config"


def test_budget_empirical_sensitivity(tmp_path):
    out = tmp_path / "out"
    assert main(["budget", "--config", write_config(tmp_path), "--out", str(out), "--t-max", "0"]) == 0
    meta = json.loads((out / "budget.json").read_text())
    assert meta["sensitivity_source"] == "empirical" and all(d > 0 for d in meta["delta_f"])


def test_sweep(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, seeds=[0])
    assert main(["sweep", "--config", cfg, "--out", str(out), "--beta-list", "0.05,0.5", "--attack"]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 2 * 3
    assert {r["beta"] for r in rows} == {"0.050000000000000003", "0.5"}
    assert all(r["attack_mse"] != "" for r in rows)
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert set(summary["rules"]["lppa"]) == {"0.05", "0.5"}


def test_attack_target_round(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, seeds=[0, 1])
    assert main(["attack", "--config", cfg, "--out", str(out), "--target-round", "2", "--victim", "1"]) == 0
    report = json.loads((out / "attack.json").read_text())
    assert report["target_round"] == 2 and report["victim"] == 1
    assert report["config"]["attack"]["target_round"] == 2
    assert set(report["rules"]) == {"dsgt", "dp", "lppa"}
    recon = read_csv(out / "reconstruction.csv")
    assert {r["which"] for r in recon} == {"true", "hat"}


def test_attack_victim_out_of_range(tmp_path):
    assert main(["attack", "--config", write_config(tmp_path), "--victim", "3", "--out", str(tmp_path / "o")]) == 1


def test_config_helpers():
    assert parse_number_list("0.025, 0.1,0.5") == [0.025, 0.1, 0.5]
    with pytest.raises(ConfigError):
        parse_number_list("0.1,abc")
    cfg = config_from_dict(small_config())
    assert config_from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert ExperimentConfig().validate().rounds == 50
    with pytest.raises(ConfigError):
        config_from_dict({"topology": {"nodes": 3}})

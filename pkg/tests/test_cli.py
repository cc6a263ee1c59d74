"""CLI dispatch: exit codes, JSON summaries, atomic outputs, determinism."""

import json

import numpy as np
import pytest

from hoiflab.cli import dispatch

EXPERIMENT_TOML = """
[experiment]
kind = "bias_test"
id = "cli_exp"
replications = 4
master_seed = 77

[data]
model = "gaussian"
n = 200
d = 1
split = {tr = 0.5, est = 0.5}

[truth]
s = 0.25
J = 30
amplitude = 1.0

[nuisance]
variant = "cond_variance"
rule = "series"
kstar_rule = {name = "power", exponent = 0.5}

[[tests]]
id = "u2"
kernel = "oracle"
k_rule = {name = "fixed", k = 6}
"""

CONDVAR_TOML = """
[experiment]
kind = "condvar_rate"
id = "cli_cv"
replications = 8
master_seed = 4

[condvar]
s = 0.3
d = 1
n_grid = [200, 400]
mode = "optimal"

[truth]
s = 0.3
J = 50
amplitude = 0.5
"""


def write_data_file(path, n=400, seed=0, biased=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, n)
    p = 0.3 + (0.8 * np.sqrt(2) * np.cos(2 * np.pi * X) if biased else 0.0)
    A = p + rng.standard_normal(n)
    rows = ["A,X1"] + [f"{float(a)!r},{float(x)!r}" for a, x in zip(A, X)]
    path.write_text("\n".join(rows) + "\n")


class TestRunExperiment:
    def test_run_and_rerun_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(EXPERIMENT_TOML)
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        assert dispatch(["run-experiment", str(cfg), "--out-dir", str(out1)]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["experiment_id"] == "cli_exp"
        assert dispatch(
            ["run-experiment", str(cfg), "--out-dir", str(out2), "--threads", "2"]
        ) == 0
        a = (out1 / "cli_exp_aggregate.csv").read_bytes()
        b = (out2 / "cli_exp_aggregate.csv").read_bytes()
        assert a == b
        ra = (out1 / "cli_exp_records.jsonl").read_bytes()
        rb = (out2 / "cli_exp_records.jsonl").read_bytes()
        assert ra == rb

    def test_dry_run_prints_resolved_config(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(EXPERIMENT_TOML)
        assert dispatch(["run-experiment", str(cfg), "--dry-run"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["dry_run"] is True
        assert payload["resolved_config"]["data"]["n"] == 200
        assert not (tmp_path / "results").exists()

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(EXPERIMENT_TOML.replace('n = 200', ""))
        assert dispatch(["run-experiment", str(cfg)]) == 2
        assert "data.n" in capsys.readouterr().err

    def test_unknown_command_exits_2(self, capsys):
        assert dispatch(["frobnicate"]) == 2

    def test_set_override(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(EXPERIMENT_TOML)
        assert dispatch(
            ["run-experiment", str(cfg), "--dry-run", "--set", "data.n=300"]
        ) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["resolved_config"]["data"]["n"] == 300


class TestCondvarRate:
    def test_emits_rate_csv(self, tmp_path, capsys):
        cfg = tmp_path / "cv.toml"
        cfg.write_text(CONDVAR_TOML)
        assert dispatch(["condvar-rate", str(cfg), "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "cli_cv_rate.csv").read_text().splitlines()
        assert lines[0] == "n,k,rmse,slope_fit"
        assert len(lines) == 3
        assert json.loads(capsys.readouterr().out)["slope_fit"]


class TestTestBias:
    def write_cfg(self, path, delta=0.0):
        path.write_text(
            f"""
[test_bias]
kernel = "oracle"
variant = "cond_variance"
family = "fourier"
k = 8
kstar = 3
alpha = 0.05
delta = {delta}
seed = 1
split = {{tr = 0.5, est = 0.5}}
"""
        )

    def test_no_rejection_exit_0(self, tmp_path, capsys):
        data = tmp_path / "null.csv"
        write_data_file(data, biased=False)
        cfg = tmp_path / "tb.toml"
        self.write_cfg(cfg)
        code = dispatch(["test-bias", "--data", str(data), "--config", str(cfg)])
        payload = json.loads(capsys.readouterr().out)
        assert payload["reject"] is False
        assert code == 0

    def test_rejection_exit_3(self, tmp_path, capsys):
        data = tmp_path / "biased.csv"
        # strong low-frequency signal that kstar=1 pilot cannot absorb
        rng = np.random.default_rng(5)
        n = 2000
        X = rng.uniform(0, 1, n)
        A = 1.5 * np.sqrt(2) * np.cos(2 * np.pi * X) + 0.2 * rng.standard_normal(n)
        rows = ["A,X1"] + [f"{float(a)!r},{float(x)!r}" for a, x in zip(A, X)]
        data.write_text("\n".join(rows) + "\n")
        cfg = tmp_path / "tb.toml"
        cfg.write_text(
            """
[test_bias]
kernel = "oracle"
variant = "cond_variance"
family = "fourier"
k = 8
kstar = 1
alpha = 0.05
delta = 0.0
seed = 1
split = {tr = 0.5, est = 0.5}
"""
        )
        code = dispatch(["test-bias", "--data", str(data), "--config", str(cfg)])
        payload = json.loads(capsys.readouterr().out)
        assert payload["reject"] is True
        assert code == 3

    def test_missing_column_exit_2(self, tmp_path, capsys):
        data = tmp_path / "bad.csv"
        data.write_text("B,X1\n1.0,0.5\n2.0,0.6\n")
        cfg = tmp_path / "tb.toml"
        self.write_cfg(cfg)
        assert dispatch(["test-bias", "--data", str(data), "--config", str(cfg)]) == 2


class TestUniversalCI:
    def test_outputs_all_intervals(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        write_data_file(data, n=600, seed=3)
        cfg = tmp_path / "uc.toml"
        cfg.write_text(
            """
[universal_ci]
family = "fourier"
k = 5
kstar = 2
alpha = 0.1
seed = 0
profile = true
split = {tr = 0.2, d1 = 0.4, d2 = 0.4}

[universal_ci.truth]
s = 0.4
J = 30
amplitude = 0.0
offset = 0.3
"""
        )
        assert dispatch(["universal-ci", "--data", str(data), "--config", str(cfg)]) == 0
        payload = json.loads(capsys.readouterr().out)
        plo, phi = payload["plugin"]
        assert plo <= phi
        assert payload["profile"][0] <= plo + 1e-9
        assert payload["profile"][1] >= phi - 1e-9
        assert payload["hoif_wald"][0] < payload["hoif_wald"][1]
        assert payload["lower_bound"] >= 0


class TestCheckBasis:
    def test_identity_report(self, capsys):
        assert dispatch(["check-basis", "--family", "fourier", "--k", "8",
                         "--scan-points", "2000"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["gram"]["lambda_min"] == 1.0
        assert payload["report"]["passed"] is True

    def test_monomial_fails_threshold(self, capsys):
        assert dispatch(["check-basis", "--family", "monomial", "--k", "8",
                         "--scan-points", "1000"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["report"]["passed"] is False

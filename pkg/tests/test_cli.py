import csv
import json

import numpy as np
import pytest

from pathflow.cli import main

TOY = """\
[run]
estimator = "path"
seed = 1
iterations = 120
batch_size = 32
learning_rate = 0.05
eval_every = 40
eval_samples = 256

[grid]
n_steps = 50

[dynamics]
hidden_widths = []
time_mode = "none"

[target]
kind = "gaussian"
dim = 1
sigma = 2.0
"""

IDENTITY_SMOKE = """\
[run]
estimator = "path"
seed = 2
iterations = 5
batch_size = 8
learning_rate = 0.001
eval_every = 5
eval_samples = 32

[dynamics]
hidden_widths = [4]

[target]
kind = "std_normal"
dim = 2
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestTrainCommand:
    def test_success_and_metrics_schema(self, tmp_path, capsys):
        cfg = _write(tmp_path, "toy.toml", TOY)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rows = _read_metrics(out / "metrics.csv")
        assert rows[0] == ["iter", "loss", "ess", "rev_kl", "grad_norm", "wall_ms"]
        assert [r[0] for r in rows[1:]] == ["40", "80", "120"]
        with open(out / "metrics.jsonl") as fh:
            recs = [json.loads(line) for line in fh]
        assert [r["iter"] for r in recs] == [40, 80, 120]
        assert set(recs[0]) == {"iter", "loss", "ess", "rev_kl", "grad_norm", "wall_ms"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 1
        assert manifest["ended_at"] is not None
        assert (out / "checkpoint.bin").exists()

    def test_missing_estimator_field_exit_2(self, tmp_path, capsys):
        bad = TOY.replace('estimator = "path"\n', "")
        cfg = _write(tmp_path, "bad.toml", bad)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "run.estimator" in capsys.readouterr().err

    def test_malformed_toml_exit_2(self, tmp_path, capsys):
        cfg = _write(tmp_path, "bad.toml", "[run\nestimator=")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_rerun_reproduces_metrics_modulo_wall_clock(self, tmp_path):
        cfg = _write(tmp_path, "toy.toml", TOY)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = _read_metrics(tmp_path / "a" / "metrics.csv")
        b = _read_metrics(tmp_path / "b" / "metrics.csv")
        strip = lambda rows: [r[:5] for r in rows]
        assert strip(a) == strip(b)

    def test_seed_override(self, tmp_path):
        cfg = _write(tmp_path, "toy.toml", TOY)
        out = tmp_path / "s"
        assert main(["train", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 7


class TestEvalCommand:
    def test_identity_checkpoint_base_target_perfect_ess(self, tmp_path, capsys):
        cfg = _write(tmp_path, "smoke.toml", IDENTITY_SMOKE.replace(
            "iterations = 5", "iterations = 0"))
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rc = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                   "--samples", "500", "--seed", "3"])
        captured = capsys.readouterr()
        assert rc == 0
        report = json.loads(captured.out)
        assert report["ess"] == pytest.approx(1.0, abs=1e-6)
        assert report["reverse_kl"] == pytest.approx(0.0, abs=1e-9)
        assert report["n_samples"] == 500

    def test_trained_toy_reverse_kl_matches_gaussian_oracle(self, tmp_path, capsys):
        cfg = _write(tmp_path, "toy.toml", TOY.replace("iterations = 120",
                                                       "iterations = 400"))
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        rc = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                   "--samples", "20000", "--seed", "5"])
        captured = capsys.readouterr()
        assert rc == 0
        report = json.loads(captured.out)
        # flow is N(mu, s^2) with s = e^a, mu = b (e^a - 1)/a; target N(0, 4)
        from pathflow.trainer import load_checkpoint

        _, theta, _ = load_checkpoint(out / "checkpoint.bin")
        a, b = theta
        s = np.exp(a)
        mu = b * (np.exp(a) - 1.0) / a if abs(a) > 1e-12 else b
        kl = np.log(2.0 / s) + (s**2 + mu**2) / 8.0 - 0.5
        assert report["reverse_kl"] == pytest.approx(
            kl, abs=3 * report["reverse_kl_se"] + 1e-9
        )

    def test_zero_samples_exit_2(self, tmp_path):
        cfg = _write(tmp_path, "smoke.toml", IDENTITY_SMOKE)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                     "--samples", "0", "--seed", "1"]) == 2

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"),
                     "--samples", "10", "--seed", "1"]) == 2

    def test_corrupt_checkpoint_exit_2(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"JUNKJUNK" + b"\x01" * 100)
        assert main(["eval", "--checkpoint", str(p), "--samples", "10",
                     "--seed", "1"]) == 2


GRADCHECK_CFG = """\
[run]
estimator = "path"

[target]
kind = "std_normal"
dim = 3

[gradcheck]
seed = 0
corrupt = "{corrupt}"
"""


class TestGradcheckCommand:
    def test_default_config_all_green(self, tmp_path, capsys):
        cfg = _write(tmp_path, "gc.toml", GRADCHECK_CFG.format(corrupt=""))
        assert main(["gradcheck", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "forward_aug_alpha_vs_fd" in out

    def test_corrupted_trace_gradient_detected(self, tmp_path, capsys):
        cfg = _write(
            tmp_path, "gc.toml",
            GRADCHECK_CFG.format(corrupt="grad_state_jacobian_trace"),
        )
        assert main(["gradcheck", "--config", cfg]) == 1
        captured = capsys.readouterr()
        assert "grad_state_jacobian_trace" in captured.err

    def test_unknown_corrupt_name_exit_2(self, tmp_path):
        cfg = _write(tmp_path, "gc.toml", GRADCHECK_CFG.format(corrupt="bogus_op"))
        assert main(["gradcheck", "--config", cfg]) == 2


COMPARE_CFG = """\
[run]
estimator = "path"
seed = 4
iterations = 20
batch_size = 8
learning_rate = 0.001
eval_every = 10
eval_samples = 64

[dynamics]
hidden_widths = [4]

[target]
kind = "frozen_self"
dim = 2

[compare]
n_seeds = {n_seeds}
"""


class TestCompareCommand:
    def test_perfect_fit_pair_and_summary(self, tmp_path, capsys):
        cfg = _write(tmp_path, "cmp.toml", COMPARE_CFG.format(n_seeds=2))
        out = tmp_path / "cmp"
        assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
        with open(out / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "estimator"
        table = {r[0]: r for r in rows[1:]}
        assert set(table) == {"path", "total"}
        ratio = float(table["path"][6])
        assert ratio > 0
        for est, seed in [("path", 4), ("path", 5), ("total", 4), ("total", 5)]:
            assert (out / f"metrics_{est}_seed{seed}.csv").exists()

    def test_single_seed_empty_sd_fields(self, tmp_path):
        cfg = _write(tmp_path, "cmp.toml", COMPARE_CFG.format(n_seeds=1))
        out = tmp_path / "cmp"
        assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
        with open(out / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        table = {r[0]: r for r in rows[1:]}
        assert table["path"][4] == ""
        assert table["total"][4] == ""

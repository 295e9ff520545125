import os

import numpy as np
import pytest

from pathflow.dynamics import DynamicsConfig, init_params, param_count
from pathflow.numerics import seeded_stream
from pathflow.odeint import TimeGrid
from pathflow.targets import IsotropicGaussianTarget, TargetDensity
from pathflow.trainer import (
    AdamState,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    compare_estimators,
    load_checkpoint,
    save_checkpoint,
    train,
)

GRID = TimeGrid(0.0, 1.0, 50)


def _cfg(**kw):
    base = dict(
        estimator="path",
        dynamics=DynamicsConfig(1, (), time_mode="none"),
        target=IsotropicGaussianTarget(1, 2.0),
        grid=GRID,
        batch_size=32,
        iterations=50,
        learning_rate=0.05,
        seed=1,
        eval_every=25,
        eval_samples=128,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestAdamStep:
    def test_zero_gradient_leaves_params_unchanged(self):
        cfg = _cfg()
        state = AdamState.zeros(3)
        params = np.array([1.0, -2.0, 0.5])
        new_state, new_params = adam_step(state, params, np.zeros(3), cfg)
        assert np.array_equal(new_params, params)
        assert new_state.step == 1

    def test_first_step_is_lr_times_sign(self):
        cfg = _cfg(learning_rate=0.01, adam_eps=1e-12)
        g = np.array([2.0, -0.5, 10.0])
        _, new_params = adam_step(AdamState.zeros(3), np.zeros(3), g, cfg)
        expect = -cfg.learning_rate * np.sign(g)
        assert np.max(np.abs(new_params - expect)) < 1e-6 * cfg.learning_rate

    def test_beta_zero_reduces_to_rms_normalized_sgd(self):
        cfg = _cfg(adam_beta1=0.0, adam_beta2=0.0, learning_rate=0.1, adam_eps=1e-8)
        params = np.zeros(2)
        state = AdamState.zeros(2)
        g = np.array([3.0, -0.2])
        for _ in range(2):
            state, params_new = adam_step(state, params, g, cfg)
            expect = params - cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps)
            assert np.max(np.abs(params_new - expect)) < 1e-12
            params = params_new

    def test_step_bound_fresh_state_and_constant_stream(self):
        # |update| <= lr holds exactly at step 1 and for constant gradients
        cfg = _cfg(learning_rate=0.02)
        rng = seeded_stream(9, 0)
        for trial in range(5):
            g = rng.standard_normal(4) * 10.0 ** rng.standard_normal(1)[0]
            params = np.zeros(4)
            state = AdamState.zeros(4)
            for _ in range(10):
                state, new_params = adam_step(state, params, g, cfg)
                assert np.max(np.abs(new_params - params)) <= cfg.learning_rate * (1 + 1e-12)
                params = new_params

    def test_step_bound_random_stream_kingma_constant(self):
        # for (1-b1) > sqrt(1-b2) the worst-case move is lr (1-b1)/sqrt(1-b2)
        cfg = _cfg(learning_rate=0.02)
        bound = cfg.learning_rate * (1 - cfg.adam_beta1) / np.sqrt(1 - cfg.adam_beta2)
        rng = seeded_stream(9, 1)
        params = np.zeros(4)
        state = AdamState.zeros(4)
        for _ in range(200):
            g = rng.standard_normal(4) * 3.0
            state, new_params = adam_step(state, params, g, cfg)
            assert np.max(np.abs(new_params - params)) <= bound * (1 + 1e-9)
            params = new_params

    def test_nonfinite_gradient_aborts_with_diagnostics(self):
        cfg = _cfg()
        g = np.array([1.0, np.nan, 2.0])
        with pytest.raises(TrainingDiverged, match="index 1"):
            adam_step(AdamState.zeros(3), np.zeros(3), g, cfg)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.zeros(3), np.zeros(2), np.zeros(2), _cfg())


class TestTrain:
    def test_zero_iterations(self):
        cfg = _cfg(iterations=0)
        res = train(cfg)
        expect = init_params(cfg.dynamics, seeded_stream(cfg.seed, (1 << 63) - 1))
        assert np.array_equal(res.theta, expect)
        assert res.history == []

    def test_toy_gaussian_learns_the_scale(self):
        cfg = _cfg(iterations=500, batch_size=64, eval_every=100, eval_samples=512)
        res = train(cfg)
        assert np.exp(res.theta[0]) == pytest.approx(2.0, rel=0.05)

    def test_bitwise_deterministic_modulo_wall_clock(self):
        cfg = _cfg(iterations=40, eval_every=20)
        a = train(cfg)
        b = train(cfg)
        assert np.array_equal(a.theta, b.theta)
        rows_a = [r.row()[:5] for r in a.history]
        rows_b = [r.row()[:5] for r in b.history]
        assert rows_a == rows_b

    def test_thread_cap_does_not_change_results(self, monkeypatch):
        cfg = _cfg(iterations=20, eval_every=10)
        monkeypatch.setenv("PATHFLOW_THREADS", "1")
        a = train(cfg)
        monkeypatch.setenv("PATHFLOW_THREADS", "4")
        b = train(cfg)
        assert np.array_equal(a.theta, b.theta)

    def test_record_schedule_includes_final_iteration(self):
        cfg = _cfg(iterations=7, eval_every=3)
        res = train(cfg)
        assert [r.iteration for r in res.history] == [3, 6, 7]

    def test_divergence_preserves_partial_history(self):
        class ExplodingTarget(TargetDensity):
            dim = 1

            def energy(self, x):
                return 0.5 * np.sum(x * x, axis=-1)

            def grad_energy(self, x):
                x = np.asarray(x)
                bad = np.full_like(x, np.nan)
                return bad if ExplodingTarget.armed else x

            armed = False

        cfg = _cfg(target=ExplodingTarget(), estimator="total",
                   iterations=30, eval_every=5)
        ExplodingTarget.armed = False
        train(_cfg(iterations=0))
        ExplodingTarget.armed = True
        with pytest.raises(TrainingDiverged) as exc_info:
            train(cfg)
        assert exc_info.value.iteration == 1
        assert exc_info.value.history == []


class TestPerfectFitTraining:
    def test_path_training_leaves_params_exactly_fixed(self):
        cfg = _cfg(
            estimator="path",
            dynamics=DynamicsConfig(3, (8,), time_mode="concat"),
            target="frozen_self",
            iterations=100,
            batch_size=16,
            learning_rate=1e-3,
            eval_every=50,
        )
        res = train(cfg)
        theta0 = init_params(cfg.dynamics, seeded_stream(cfg.seed, (1 << 63) - 1))
        assert np.max(np.abs(res.theta - theta0)) <= 1e-6

    def test_total_training_moves_params(self):
        cfg = _cfg(
            estimator="total",
            dynamics=DynamicsConfig(3, (8,), time_mode="concat"),
            target="frozen_self",
            iterations=20,
            batch_size=16,
            learning_rate=1e-3,
            eval_every=10,
        )
        res = train(cfg)
        theta0 = init_params(cfg.dynamics, seeded_stream(cfg.seed, (1 << 63) - 1))
        assert np.max(np.abs(res.theta - theta0)) > 1e-4


class TestCompareEstimators:
    def test_perfect_fit_smoke(self):
        cfg = _cfg(
            dynamics=DynamicsConfig(2, (6,), time_mode="concat"),
            target="frozen_self",
            iterations=30,
            batch_size=16,
            learning_rate=1e-3,
            eval_every=10,
            eval_samples=64,
        )
        result = compare_estimators(cfg, n_seeds=1)
        assert {r.estimator for r in result.runs} == {"path", "total"}
        path_run = result.runs_for("path")[0]
        total_run = result.runs_for("total")[0]
        assert all(r.grad_norm <= 1e-8 for r in path_run.history)
        assert all(r.grad_norm > 1e-4 for r in total_run.history)
        # ESS stays pinned at 1 for the run that never moves
        assert path_run.history[-1].ess == pytest.approx(1.0, abs=1e-9)
        assert np.isnan(result.summary["path"]["final_ess_sd"])
        assert np.isfinite(result.summary["time_ratio_path_over_total"])

    def test_seed_layout(self):
        cfg = _cfg(iterations=4, eval_every=2, batch_size=8, eval_samples=16)
        result = compare_estimators(cfg, n_seeds=2)
        assert [(r.estimator, r.seed) for r in result.runs] == [
            ("path", 1), ("path", 2), ("total", 1), ("total", 2),
        ]


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        path = tmp_path / "ck.bin"
        theta = seeded_stream(11, 0).standard_normal(17)
        adam = AdamState(
            seeded_stream(11, 1).standard_normal(17),
            np.abs(seeded_stream(11, 2).standard_normal(17)),
            step=42,
        )
        save_checkpoint(path, "config text\n", theta, adam)
        text, theta2, adam2 = load_checkpoint(path)
        assert text == "config text\n"
        assert np.array_equal(theta, theta2)
        assert np.array_equal(adam.m, adam2.m)
        assert np.array_equal(adam.v, adam2.v)
        assert adam2.step == 42

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        path.write_bytes(b"NOTPFLOW" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_corrupted_config_hash_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, "abc", np.zeros(3), AdamState.zeros(3))
        raw = bytearray(path.read_bytes())
        raw[50] ^= 0xFF  # config text starts right after the 49-byte header
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, "abc", np.zeros(3), AdamState.zeros(3))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestConfigValidation:
    def test_estimator_name(self):
        with pytest.raises(ValueError):
            _cfg(estimator="bogus")

    def test_positive_learning_rate(self):
        with pytest.raises(ValueError):
            _cfg(learning_rate=0.0)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            _cfg(adam_beta1=1.0)

"""Adam optimization of a flow against a target, with seeded batching,
metric logging, checkpointing and paired estimator-comparison runs.

Reproducibility contract: a run is a pure function of its TrainConfig.
Base draws for training iteration k, sample i come from the stream
(seed, k * batch_size + i); evaluation batches use a disjoint stream family
offset by 2**62, and parameter initialization uses stream 2**63 - 1, so no
consumer ever shares a stream.  BLAS pools are capped (PATHFLOW_THREADS,
default 1) so results do not depend on the host's thread configuration.

The trainer is the one place that mutates anything; everything it calls is
pure.  A non-finite gradient aborts the run but preserves the metric
history gathered so far (runs are reported, never silently dropped).
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import cnf, estimators
from .dynamics import DynamicsConfig, init_params, param_count
from .numerics import seeded_stream
from .odeint import TimeGrid
from .targets import TargetDensity

__all__ = [
    "TrainConfig",
    "AdamState",
    "MetricsRecord",
    "TrainResult",
    "TrainingDiverged",
    "CheckpointError",
    "adam_step",
    "train",
    "compare_estimators",
    "RunResult",
    "ComparisonResult",
    "save_checkpoint",
    "load_checkpoint",
]

_EVAL_STREAM_BASE = 1 << 62
_INIT_STREAM_ID = (1 << 63) - 1

CHECKPOINT_MAGIC = b"PATHFLOW"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A training step produced non-finite numbers; carries the state so
    far so partial histories can still be reported."""

    def __init__(self, message, iteration, theta, history):
        super().__init__(message)
        self.iteration = iteration
        self.theta = theta
        self.history = history


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    estimator: str                      # "path" | "total"
    dynamics: DynamicsConfig
    target: Union[TargetDensity, str]   # a density, or "frozen_self"
    grid: TimeGrid
    batch_size: int = 256
    iterations: int = 1000
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 2048

    def __post_init__(self):
        if self.estimator not in ("path", "total"):
            raise ValueError(f"estimator must be 'path' or 'total', got {self.estimator!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eval_every < 1 or self.eval_samples < 2:
            raise ValueError("eval_every must be >= 1 and eval_samples >= 2")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class TrainResult:
    theta: np.ndarray
    adam: "AdamState"
    history: list


@dataclass
class MetricsRecord:
    iteration: int
    loss: float
    ess: float
    rev_kl: float
    grad_norm: float
    wall_ms: float

    FIELDS = ("iter", "loss", "ess", "rev_kl", "grad_norm", "wall_ms")

    def row(self) -> tuple:
        return (self.iteration, self.loss, self.ess, self.rev_kl, self.grad_norm, self.wall_ms)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, cfg: TrainConfig):
    """One bias-corrected Adam update; returns (new_state, new_params)."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state length mismatch")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingDiverged(
            f"non-finite gradient in {bad.size} entries (first at index {bad[0]}) "
            f"at optimizer step {state.step + 1}",
            state.step + 1,
            params,
            [],
        )
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new_params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return AdamState(m, v, step), new_params


def _blas_cap():
    """Limit BLAS pools so results are independent of the host's thread
    count; PATHFLOW_THREADS raises the cap for users who accept that."""
    n = int(os.environ.get("PATHFLOW_THREADS", "1") or "1")
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=max(1, n))
    except ImportError:  # pragma: no cover
        return nullcontext()


def _resolve_target(cfg: TrainConfig, theta_init: np.ndarray) -> TargetDensity:
    if isinstance(cfg.target, str):
        if cfg.target == "frozen_self":
            return cnf.FlowTarget(cfg.dynamics, theta_init, cfg.grid)
        raise ValueError(f"unknown target spec {cfg.target!r}")
    return cfg.target


def _draw_batch(seed: int, base_id: int, n: int, d: int) -> np.ndarray:
    out = np.empty((n, d))
    for i in range(n):
        out[i] = seeded_stream(seed, base_id + i).standard_normal(d)
    return out


def _grad_fn(name: str):
    def fn(dyn_cfg, theta, z0, target, grid):
        return cnf.batch_gradient(dyn_cfg, theta, z0, target, grid, name)

    return fn


def evaluate_model(cfg: TrainConfig, theta: np.ndarray, target: TargetDensity,
                   n_samples: int, stream_base: int) -> estimators.BatchEval:
    """Fresh-sample batch evaluation of the flow against the target."""
    z0 = _draw_batch(cfg.seed, stream_base, n_samples, cfg.dynamics.state_dim)
    fs = cnf.sample_forward(cfg.dynamics, theta, z0, cfg.grid)
    return estimators.BatchEval(fs.log_q, target.energy(fs.x))


def train(cfg: TrainConfig) -> TrainResult:
    """Run the configured optimization; returns the final parameters, the
    optimizer state and the metrics history.

    Metric records are appended every ``eval_every`` iterations (and at the
    final iteration): loss and ESS / reverse KL come from fresh evaluation
    draws, grad_norm is the norm of the current batch-mean gradient, and
    wall_ms is the mean wall-clock per *training* iteration since the last
    record (evaluation cost excluded).
    """
    d = cfg.dynamics.state_dim
    theta = init_params(cfg.dynamics, seeded_stream(cfg.seed, _INIT_STREAM_ID))
    target = _resolve_target(cfg, theta)
    grad_fn = _grad_fn(cfg.estimator)
    adam = AdamState.zeros(param_count(cfg.dynamics))
    history: list = []
    window_wall = 0.0
    window_count = 0
    eval_idx = 0
    with _blas_cap():
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            try:
                z0 = _draw_batch(cfg.seed, it * cfg.batch_size, cfg.batch_size, d)
                g = grad_fn(cfg.dynamics, theta, z0, target, cfg.grid)
                adam, theta = adam_step(adam, theta, g, cfg)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), it + 1, theta, history) from None
            except (FloatingPointError, RuntimeError) as exc:
                raise TrainingDiverged(
                    f"iteration {it + 1} failed: {exc}", it + 1, theta, history
                ) from exc
            window_wall += time.perf_counter() - t0
            window_count += 1
            if (it + 1) % cfg.eval_every == 0 or (it + 1) == cfg.iterations:
                batch = evaluate_model(
                    cfg, theta, target, cfg.eval_samples,
                    _EVAL_STREAM_BASE + eval_idx * cfg.eval_samples,
                )
                diag = estimators.batch_diagnostics(batch)
                history.append(
                    MetricsRecord(
                        iteration=it + 1,
                        loss=diag["free_energy"],
                        ess=diag["ess"],
                        rev_kl=diag["reverse_kl"],
                        grad_norm=estimators.grad_norm(g),
                        wall_ms=1e3 * window_wall / window_count,
                    )
                )
                eval_idx += 1
                window_wall = 0.0
                window_count = 0
    return TrainResult(theta, adam, history)


@dataclass
class RunResult:
    estimator: str
    seed: int
    history: list
    theta: Optional[np.ndarray]
    error: Optional[str] = None

    @property
    def final_ess(self) -> float:
        return self.history[-1].ess if self.history else float("nan")

    @property
    def mean_wall_ms(self) -> float:
        if not self.history:
            return float("nan")
        return float(np.mean([r.wall_ms for r in self.history]))


@dataclass
class ComparisonResult:
    runs: list
    summary: dict

    def runs_for(self, estimator: str) -> list:
        return [r for r in self.runs if r.estimator == estimator]


def compare_estimators(cfg: TrainConfig, n_seeds: int) -> ComparisonResult:
    """Train both estimators over n_seeds seeds each from identical configs
    (only the estimator field and the seed differ) and report aligned
    histories plus the per-iteration wall-clock ratio.

    Diverged runs are kept in the report with their partial history and the
    error message; nothing is silently dropped.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    runs = []
    for estimator in ("path", "total"):
        for k in range(n_seeds):
            run_cfg = replace(cfg, estimator=estimator, seed=cfg.seed + k)
            try:
                res = train(run_cfg)
                runs.append(RunResult(estimator, run_cfg.seed, res.history, res.theta))
            except TrainingDiverged as exc:
                runs.append(
                    RunResult(estimator, run_cfg.seed, exc.history, exc.theta, str(exc))
                )
    summary = {}
    for estimator in ("path", "total"):
        good = [r for r in runs if r.estimator == estimator and r.error is None]
        finals = [r.final_ess for r in good]
        walls = [r.mean_wall_ms for r in good]
        summary[estimator] = {
            "n_runs": len([r for r in runs if r.estimator == estimator]),
            "n_ok": len(good),
            "final_ess_mean": float(np.mean(finals)) if finals else float("nan"),
            "final_ess_sd": float(np.std(finals, ddof=1)) if len(finals) > 1 else float("nan"),
            "mean_wall_ms": float(np.mean(walls)) if walls else float("nan"),
        }
    pw = summary["path"]["mean_wall_ms"]
    tw = summary["total"]["mean_wall_ms"]
    summary["time_ratio_path_over_total"] = pw / tw if tw and np.isfinite(tw) else float("nan")
    return ComparisonResult(runs, summary)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
# Little-endian layout:
#   8 bytes   magic "PATHFLOW"
#   1 byte    version (1)
#   32 bytes  SHA-256 of the config text
#   u64       config text length, followed by that many UTF-8 bytes
#   u64       parameter count P, followed by P float64 parameters
#   P float64 Adam first moment
#   P float64 Adam second moment
#   u64       Adam step counter


def save_checkpoint(path, config_text: str, theta: np.ndarray, adam: AdamState) -> None:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    m = np.ascontiguousarray(adam.m, dtype="<f8")
    v = np.ascontiguousarray(adam.v, dtype="<f8")
    if not (theta.shape == m.shape == v.shape):
        raise ValueError("parameter and Adam moment lengths differ")
    blob = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(hashlib.sha256(blob).digest())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())
        fh.write(m.tobytes())
        fh.write(v.tobytes())
        fh.write(struct.pack("<Q", adam.step))


def load_checkpoint(path):
    """Read a checkpoint; returns (config_text, theta, AdamState)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic: not a pathflow checkpoint")
        if raw[8] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {raw[8]}")
        digest = raw[9:41]
        (text_len,) = struct.unpack_from("<Q", raw, 41)
        pos = 49
        blob = raw[pos : pos + text_len]
        pos += text_len
        if hashlib.sha256(blob).digest() != digest:
            raise CheckpointError("config hash mismatch: checkpoint is corrupt")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy())
            pos += 8 * n
        (step,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except (IndexError, ValueError, struct.error) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    theta, m, v = arrays
    return blob.decode("utf-8"), theta, AdamState(m, v, int(step))

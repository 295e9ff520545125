"""Loss and diagnostic statistics for flow-vs-target batches.

All importance-weight arithmetic happens in log space with max-subtraction;
raw exp(-S - log q) overflows already at small lattices.  The normalized
effective sample size

    ESS = (mean w)^2 / mean(w^2)  in (0, 1]

is invariant under adding a constant to all log weights, as is the reverse
KL estimate  F + ln Z_hat  with  F = mean(log_q + E)  and  ln Z_hat the
log-mean-exp of the log weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cnf
from .numerics import seeded_stream

__all__ = [
    "BatchEval",
    "free_energy",
    "ess",
    "log_partition",
    "reverse_kl",
    "grad_norm",
    "batch_diagnostics",
    "score_mean_diagnostic",
]


@dataclass
class BatchEval:
    """Per-sample scalars of one evaluation batch; log_w = -energy - log_q."""

    log_q: np.ndarray
    energy: np.ndarray
    log_w: np.ndarray = field(init=False)

    def __post_init__(self):
        self.log_q = np.asarray(self.log_q, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        if self.log_q.ndim != 1 or self.log_q.shape != self.energy.shape:
            raise ValueError("log_q and energy must be equal-length 1-D arrays")
        if self.log_q.size < 1:
            raise ValueError("batch must contain at least one sample")
        self.log_w = -self.energy - self.log_q


def free_energy(batch: BatchEval) -> float:
    """mean(log_q + energy); estimates KL(q, p) + ln Z."""
    return float(np.mean(batch.log_q + batch.energy))


def _shifted_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.ndim != 1 or log_w.size < 1:
        raise ValueError("log weights must be a non-empty 1-D array")
    m = np.max(log_w)
    if not np.isfinite(m):
        raise ValueError("degenerate batch: no finite log weight")
    return np.exp(log_w - m)


def ess(log_w) -> float:
    """Normalized effective sample size, computed stably in log space."""
    w = _shifted_weights(np.asarray(log_w, dtype=np.float64))
    n = w.size
    s1 = float(np.sum(w))
    s2 = float(np.sum(w * w))
    return (s1 * s1) / (n * s2)


def log_partition(log_w) -> float:
    """ln Z_hat = log-mean-exp of the log weights."""
    log_w = np.asarray(log_w, dtype=np.float64)
    w = _shifted_weights(log_w)
    return float(np.max(log_w) + np.log(np.mean(w)))


def reverse_kl(batch: BatchEval) -> float:
    """free_energy + log_partition; >= 0 in expectation, 0 at a perfect fit."""
    if batch.log_q.size < 2:
        raise ValueError("reverse_kl needs at least two samples")
    return free_energy(batch) + log_partition(batch.log_w)


def grad_norm(g) -> float:
    """Euclidean norm of a flat gradient."""
    return float(np.linalg.norm(np.asarray(g, dtype=np.float64)))


def batch_diagnostics(batch: BatchEval) -> dict:
    """ESS, reverse KL and free energy with delta-method standard errors.

    Influence functions: for F = mean(g) it is g_i - F; for ln Z_hat it is
    w_i / mean(w) - 1; reverse KL combines the two (their covariance
    included by summing per-sample contributions); ESS = m1^2/m2 uses the
    gradient (2 m1/m2, -m1^2/m2^2) in the weight moments.
    """
    n = batch.log_q.size
    g = batch.log_q + batch.energy
    w = _shifted_weights(batch.log_w)
    m1 = float(np.mean(w))
    m2 = float(np.mean(w * w))
    ess_val = m1 * m1 / m2
    if_ess = (2.0 * m1 / m2) * (w - m1) - (m1 * m1 / (m2 * m2)) * (w * w - m2)
    if_rkl = (g - np.mean(g)) + (w / m1 - 1.0)
    sqrt_n = np.sqrt(n)
    return {
        "n_samples": int(n),
        "free_energy": free_energy(batch),
        "free_energy_se": float(np.std(g, ddof=1) / sqrt_n) if n > 1 else float("nan"),
        "ess": float(ess_val),
        "ess_se": float(np.std(if_ess, ddof=1) / sqrt_n) if n > 1 else float("nan"),
        "reverse_kl": reverse_kl(batch) if n > 1 else float("nan"),
        "reverse_kl_se": float(np.std(if_rkl, ddof=1) / sqrt_n) if n > 1 else float("nan"),
    }


def score_mean_diagnostic(cfg, theta, grid, n_samples: int, seed: int, chunk: int = 512):
    """Batch mean and per-entry standard error of score-gradient draws.

    The score term has zero mean; its covariance is the Fisher information
    of the variational density, so this doubles as a scale estimate.  Base
    draws come from per-sample streams (seed, i) in sample-index order.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples for a meaningful diagnostic")
    d = cfg.state_dim
    total = None
    total_sq = None
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        z0 = np.empty((m, d))
        for j in range(m):
            z0[j] = seeded_stream(seed, done + j).standard_normal(d)
        g = cnf.score_gradient(cfg, theta, z0, grid)
        s = g.sum(axis=0)
        ssq = (g * g).sum(axis=0)
        total = s if total is None else total + s
        total_sq = ssq if total_sq is None else total_sq + ssq
        done += m
    mean = total / n_samples
    var = (total_sq - n_samples * mean * mean) / (n_samples - 1)
    stderr = np.sqrt(np.maximum(var, 0.0) / n_samples)
    return mean, stderr

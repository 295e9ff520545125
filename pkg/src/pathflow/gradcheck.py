"""Self-contained oracle suite for every derivative the flow relies on.

Each check pits an implementation against an independent oracle (central
finite differences, unit-vector trace assembly, closed-form linear flows,
or an algebraic identity) and reports the worst relative error.  The CLI's
``gradcheck`` subcommand runs this suite and gates on it.

A named operation can be deliberately corrupted (``corrupt=...``) to verify
that the suite actually catches broken derivatives; corruption lives
entirely inside this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cnf, dynamics as dyn
from .numerics import finite_diff_grad, seeded_stream
from .odeint import TimeGrid
from .targets import IsotropicGaussianTarget, base_log_prob

__all__ = ["CheckResult", "run_gradcheck", "CORRUPTIBLE_OPS"]

CORRUPTIBLE_OPS = (
    "vjp_state",
    "vjp_params",
    "jacobian_trace",
    "grad_state_jacobian_trace",
    "grad_params_jacobian_trace",
)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel(err_arr, ref_arr) -> float:
    err = np.max(np.abs(np.asarray(err_arr)))
    scale = np.max(np.abs(np.asarray(ref_arr)))
    return float(err / max(scale, 1e-12))


def _maybe_corrupt(name, corrupt, value):
    if name == corrupt:
        return value + 1e-3 * (1.0 + np.abs(value))
    return value


def _instances(seed):
    """A spread of small architectures covering every depth and time mode."""
    specs = [
        (2, (), "none"),
        (2, (7,), "concat"),
        (3, (8,), "concat"),
        (3, (6, 5), "concat"),
        (4, (8, 6), "none"),
    ]
    out = []
    for k, (d, widths, tm) in enumerate(specs):
        cfg = dyn.DynamicsConfig(d, widths, time_mode=tm)
        theta = dyn.random_params(cfg, seeded_stream(seed, 100 + k))
        z = seeded_stream(seed, 200 + k).standard_normal(d)
        out.append((cfg, theta, z, 0.3 + 0.1 * k))
    return out


def run_gradcheck(seed: int = 0, corrupt: str = "", n_flow_instances: int = 4) -> list:
    """Run the full oracle suite; returns a list of CheckResult."""
    if corrupt and corrupt not in CORRUPTIBLE_OPS:
        raise ValueError(
            f"unknown corruptible op {corrupt!r}; choose one of {CORRUPTIBLE_OPS}"
        )
    results = []
    insts = _instances(seed)

    # first-order dynamics derivatives vs finite differences
    worst = 0.0
    for cfg, theta, z, t in insts:
        a = seeded_stream(seed, 300).standard_normal(cfg.state_dim)
        got = _maybe_corrupt("vjp_state", corrupt, dyn.vjp_state(cfg, theta, z, t, a))
        fd = finite_diff_grad(lambda zz: float(a @ dyn.forward(cfg, theta, zz, t)), z)
        worst = max(worst, _rel(got - fd, fd))
    results.append(CheckResult("vjp_state_vs_fd", worst, 1e-7))

    worst = 0.0
    for cfg, theta, z, t in insts:
        a = seeded_stream(seed, 301).standard_normal(cfg.state_dim)
        got = _maybe_corrupt("vjp_params", corrupt, dyn.vjp_params(cfg, theta, z, t, a))
        fd = finite_diff_grad(lambda th: float(a @ dyn.forward(cfg, th, z, t)), theta)
        worst = max(worst, _rel(got - fd, fd))
    results.append(CheckResult("vjp_params_vs_fd", worst, 1e-7))

    # trace vs explicit unit-vector assembly of the Jacobian
    worst = 0.0
    for cfg, theta, z, t in insts:
        d = cfg.state_dim
        rows = [dyn.vjp_state(cfg, theta, z, t, np.eye(d)[i]) for i in range(d)]
        tr_asm = float(np.trace(np.stack(rows)))
        got = _maybe_corrupt(
            "jacobian_trace", corrupt, dyn.jacobian_trace(cfg, theta, z, t)
        )
        worst = max(worst, abs(got - tr_asm) / max(abs(tr_asm), 1e-12))
    results.append(CheckResult("jacobian_trace_vs_assembly", worst, 1e-12))

    worst = 0.0
    for cfg, theta, z, t in insts:
        got = _maybe_corrupt(
            "grad_state_jacobian_trace",
            corrupt,
            dyn.grad_state_jacobian_trace(cfg, theta, z, t),
        )
        fd = finite_diff_grad(lambda zz: dyn.jacobian_trace(cfg, theta, zz, t), z)
        worst = max(worst, _rel(got - fd, np.where(np.abs(fd) > 1e-8, fd, 1.0)))
    results.append(CheckResult("grad_state_jacobian_trace_vs_fd", worst, 1e-6))

    worst = 0.0
    for cfg, theta, z, t in insts:
        got = _maybe_corrupt(
            "grad_params_jacobian_trace",
            corrupt,
            dyn.grad_params_jacobian_trace(cfg, theta, z, t),
        )
        fd = finite_diff_grad(lambda th: dyn.jacobian_trace(cfg, th, z, t), theta)
        worst = max(worst, _rel(got - fd, np.where(np.abs(fd) > 1e-8, fd, 1.0)))
    results.append(CheckResult("grad_params_jacobian_trace_vs_fd", worst, 1e-6))

    # Theorem-style forward derivative of the log density vs FD
    grid = TimeGrid(0.0, 1.0, 50)
    worst = 0.0
    for k in range(n_flow_instances):
        d = (2, 3, 4, 6)[k % 4]
        cfg = dyn.DynamicsConfig(d, (8,), time_mode="concat")
        theta = dyn.random_params(cfg, seeded_stream(seed, 400 + k))
        z0 = seeded_stream(seed, 500 + k).standard_normal(d)
        fs = cnf.forward_aug(cfg, theta, z0, grid)
        fd = finite_diff_grad(
            lambda xx: cnf.log_density(cfg, theta, xx, grid), fs.x, h=1e-6
        )
        worst = max(worst, _rel(fs.dlogq_dx - fd, fs.dlogq_dx))
    results.append(CheckResult("forward_aug_alpha_vs_fd", worst, 1e-5))

    # decomposition identity: total = path + score, per sample and entry
    worst = 0.0
    for k in range(n_flow_instances):
        d = (2, 3, 4, 6)[k % 4]
        cfg = dyn.DynamicsConfig(d, (8,), time_mode="concat")
        theta = dyn.random_params(cfg, seeded_stream(seed, 400 + k))
        z0 = seeded_stream(seed, 600 + k).standard_normal(d)
        target = IsotropicGaussianTarget(d, 1.5)
        tot = cnf.total_gradient(cfg, theta, z0, target, grid)
        pth = cnf.path_gradient(cfg, theta, z0, target, grid)
        sco = cnf.score_gradient(cfg, theta, z0, grid)
        worst = max(worst, _rel(tot - (pth + sco), tot))
    results.append(CheckResult("total_equals_path_plus_score", worst, 1e-8))

    # perfect fit: frozen self-target makes the path gradient vanish
    d = 3
    cfg = dyn.DynamicsConfig(d, (8,), time_mode="concat")
    theta = dyn.random_params(cfg, seeded_stream(seed, 700), scale=0.5)
    frozen = cnf.FlowTarget(cfg, theta, grid)
    z0 = seeded_stream(seed, 701).standard_normal(3 * d).reshape(3, d)
    pg = cnf.path_gradient(cfg, theta, z0, frozen, grid)
    err = float(np.max(np.linalg.norm(pg, axis=1)) / (1.0 + np.linalg.norm(theta)))
    results.append(CheckResult("perfect_fit_path_gradient_zero", err, 1e-8))

    # analytic scalar linear flow f = a z
    a = 0.7
    lin = dyn.DynamicsConfig(1, (), time_mode="none")
    th_lin = np.array([a, 0.0])
    z0 = np.array([1.3])
    fs = cnf.forward_aug(lin, th_lin, z0, grid)
    x_exact = z0[0] * np.exp(a)
    logq_exact = base_log_prob(z0) - a
    alpha_exact = -x_exact * np.exp(-2.0 * a)
    err = max(
        abs(fs.x[0] - x_exact) / abs(x_exact),
        abs(fs.log_q - logq_exact) / abs(logq_exact),
        abs(fs.dlogq_dx[0] - alpha_exact) / abs(alpha_exact),
    )
    results.append(CheckResult("linear_flow_closed_forms", float(err), 1e-7))

    return results


def format_results(results) -> str:
    lines = [f"{'check':40s} {'max_rel_err':>12s} {'tol':>8s}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:40s} {r.max_rel_err:12.3e} {r.tol:8.0e}  {status}")
    return "\n".join(lines)

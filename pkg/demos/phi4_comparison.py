"""Short paired phi^4 comparison at desk scale.

Trains the L=4 lattice flow with the path-gradient and total-derivative
estimators over two seeds each (a reduced version of the acceptance
campaign) and prints the ESS evolution, the final importance-sampling
quality, and the measured per-iteration cost ratio.  Expect a few minutes
on one core.

Run:  python demos/phi4_comparison.py
"""

import numpy as np

from pathflow.dynamics import DynamicsConfig
from pathflow.odeint import TimeGrid
from pathflow.targets import Phi4Lattice
from pathflow.trainer import TrainConfig, compare_estimators

cfg = TrainConfig(
    estimator="path",
    dynamics=DynamicsConfig(16, (64,), time_mode="concat"),
    target=Phi4Lattice(L=4, m2=-4.0, lam=6.975),
    grid=TimeGrid(0.0, 1.0, 50),
    batch_size=256,
    iterations=600,
    learning_rate=5e-3,
    seed=0,
    eval_every=100,
    eval_samples=1024,
)
result = compare_estimators(cfg, n_seeds=2)

for run in result.runs:
    status = f"diverged: {run.error}" if run.error else "ok"
    curve = " ".join(f"{r.ess:.3f}" for r in run.history)
    print(f"{run.estimator:>5} seed {run.seed}  [{status}]  ESS: {curve}")

s = result.summary
print("\nfinal ESS  path :", f"{s['path']['final_ess_mean']:.4f}",
      "+-", f"{s['path']['final_ess_sd']:.4f}")
print("final ESS  total:", f"{s['total']['final_ess_mean']:.4f}",
      "+-", f"{s['total']['final_ess_sd']:.4f}")
print("wall per iteration: path",
      f"{s['path']['mean_wall_ms']:.1f}ms, total",
      f"{s['total']['mean_wall_ms']:.1f}ms  ->  ratio",
      f"{s['time_ratio_path_over_total']:.3f}")

"""Command-line entry point: train, eval, gradcheck and compare.

    pathflow train     --config cfg.toml --out runs/x [--seed N]
    pathflow eval      --checkpoint runs/x/checkpoint.bin --samples N --seed N
    pathflow gradcheck --config cfg.toml
    pathflow compare   --config cfg.toml --out runs/cmp

Configs are a flat TOML subset (dotted sections, scalar/array values); see
README for the schema.  Exit codes: 0 success, 1 runtime or check failure,
2 usage/config error.  Metrics are written both as CSV (header
``iter,loss,ess,rev_kl,grad_norm,wall_ms``) and as JSONL with identical
field names.  A run manifest is written before training starts; rerunning
from the echoed config reproduces the metrics (wall-clock fields aside).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from . import __version__, gradcheck
from .dynamics import DynamicsConfig, param_count
from .estimators import BatchEval, batch_diagnostics
from .numerics import seeded_stream
from .odeint import TimeGrid
from .targets import GaussianMixtureTarget, IsotropicGaussianTarget, Phi4Lattice
from .trainer import (
    CheckpointError,
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    compare_estimators,
    load_checkpoint,
    save_checkpoint,
    train,
)
from . import cnf

__all__ = ["main", "ConfigError", "parse_config"]


class ConfigError(Exception):
    """Malformed or incomplete configuration; maps to exit code 2."""


def _get(doc, section, key, default=None, required=False):
    sec = doc.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section [{section}] must be a table")
    if key in sec:
        return sec[key]
    if required:
        raise ConfigError(f"missing required field {section}.{key}")
    return default


def _build_target(doc):
    kind = _get(doc, "target", "kind", required=True)
    if kind == "phi4":
        L = int(_get(doc, "target", "L", required=True))
        return Phi4Lattice(
            L=L,
            m2=float(_get(doc, "target", "m2", -4.0)),
            lam=float(_get(doc, "target", "lambda", 6.975)),
        )
    if kind in ("gaussian", "std_normal"):
        dim = int(_get(doc, "target", "dim", required=True))
        sigma = float(_get(doc, "target", "sigma", 1.0)) if kind == "gaussian" else 1.0
        return IsotropicGaussianTarget(dim, sigma)
    if kind == "mixture":
        return GaussianMixtureTarget(
            _get(doc, "target", "means", required=True),
            _get(doc, "target", "weights", required=True),
            _get(doc, "target", "sigmas", required=True),
        )
    if kind == "frozen_self":
        int(_get(doc, "target", "dim", required=True))
        return "frozen_self"
    raise ConfigError(f"target.kind must be one of phi4/gaussian/std_normal/mixture/frozen_self, got {kind!r}")


def _target_dim(doc, target):
    if isinstance(target, str):
        return int(_get(doc, "target", "dim", required=True))
    return target.dim


def parse_config(text: str, path: str = "<config>") -> tuple:
    """Parse and validate a config; returns (TrainConfig, extras dict)."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    target = _build_target(doc)
    dim = _target_dim(doc, target)
    dyn_cfg = DynamicsConfig(
        state_dim=dim,
        hidden_widths=tuple(int(w) for w in _get(doc, "dynamics", "hidden_widths", [32])),
        time_mode=str(_get(doc, "dynamics", "time_mode", "concat")),
    )
    grid = TimeGrid(
        t0=float(_get(doc, "grid", "t0", 0.0)),
        t1=float(_get(doc, "grid", "t1", 1.0)),
        n_steps=int(_get(doc, "grid", "n_steps", 50)),
    )
    try:
        cfg = TrainConfig(
            estimator=str(_get(doc, "run", "estimator", required=True)),
            dynamics=dyn_cfg,
            target=target,
            grid=grid,
            batch_size=int(_get(doc, "run", "batch_size", 256)),
            iterations=int(_get(doc, "run", "iterations", 1000)),
            learning_rate=float(_get(doc, "run", "learning_rate", 5e-4)),
            adam_beta1=float(_get(doc, "run", "adam_beta1", 0.9)),
            adam_beta2=float(_get(doc, "run", "adam_beta2", 0.999)),
            adam_eps=float(_get(doc, "run", "adam_eps", 1e-8)),
            seed=int(_get(doc, "run", "seed", 0)),
            eval_every=int(_get(doc, "run", "eval_every", 50)),
            eval_samples=int(_get(doc, "run", "eval_samples", 2048)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extras = {
        "n_seeds": int(_get(doc, "compare", "n_seeds", 3)),
        "gradcheck_seed": int(_get(doc, "gradcheck", "seed", 0)),
        "gradcheck_corrupt": str(_get(doc, "gradcheck", "corrupt", "")),
    }
    return cfg, extras


def _read_config(path: str) -> tuple:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg, extras = parse_config(text, path)
    return text, cfg, extras


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(path, config_path, config_text, seed, outputs, started_at, ended_at):
    manifest = {
        "code_version": __version__,
        "config_path": str(config_path),
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "config_text": config_text,
        "seed": int(seed),
        "started_at": started_at,
        "ended_at": ended_at,
        "outputs": outputs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _write_metrics(history, csv_path, jsonl_path):
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRecord.FIELDS)
        for r in history:
            writer.writerow(r.row())
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in history:
            fh.write(json.dumps(dict(zip(MetricsRecord.FIELDS, r.row()))))
            fh.write("\n")


def cmd_train(config_path: str, out_dir: str, seed_override=None) -> int:
    text, cfg, _ = _read_config(config_path)
    if seed_override is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=int(seed_override))
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "manifest": os.path.join(out_dir, "manifest.json"),
        "metrics_csv": os.path.join(out_dir, "metrics.csv"),
        "metrics_jsonl": os.path.join(out_dir, "metrics.jsonl"),
        "checkpoint": os.path.join(out_dir, "checkpoint.bin"),
    }
    started = _now()
    _write_manifest(paths["manifest"], config_path, text, cfg.seed,
                    {k: v for k, v in paths.items() if k != "manifest"}, started, None)
    try:
        res = train(cfg)
    except TrainingDiverged as exc:
        _write_metrics(exc.history, paths["metrics_csv"], paths["metrics_jsonl"])
        _write_manifest(paths["manifest"], config_path, text, cfg.seed,
                        {k: v for k, v in paths.items() if k != "manifest"}, started, _now())
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    _write_metrics(res.history, paths["metrics_csv"], paths["metrics_jsonl"])
    save_checkpoint(paths["checkpoint"], text, res.theta, res.adam)
    _write_manifest(paths["manifest"], config_path, text, cfg.seed,
                    {k: v for k, v in paths.items() if k != "manifest"}, started, _now())
    return 0


def cmd_eval(checkpoint_path: str, n_samples: int, seed: int) -> int:
    if n_samples < 1:
        print("eval needs --samples >= 1", file=sys.stderr)
        return 2
    try:
        text, theta, _adam = load_checkpoint(checkpoint_path)
    except (OSError, CheckpointError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 2
    cfg, _ = parse_config(text, f"{checkpoint_path}(embedded config)")
    if theta.size != param_count(cfg.dynamics):
        print(
            f"checkpoint/config mismatch: {theta.size} parameters vs "
            f"{param_count(cfg.dynamics)} expected from the config",
            file=sys.stderr,
        )
        return 2
    target = cfg.target
    if isinstance(target, str):
        # frozen_self target freezes the checkpoint parameters themselves
        target = cnf.FlowTarget(cfg.dynamics, theta, cfg.grid)
    d = cfg.dynamics.state_dim
    z0 = np.empty((n_samples, d))
    for i in range(n_samples):
        z0[i] = seeded_stream(seed, i).standard_normal(d)
    fs = cnf.sample_forward(cfg.dynamics, theta, z0, cfg.grid)
    diag = batch_diagnostics(BatchEval(fs.log_q, target.energy(fs.x)))
    diag["seed"] = int(seed)
    print(json.dumps(diag, indent=2))
    return 0


def cmd_gradcheck(config_path: str) -> int:
    _text, _cfg, extras = _read_config(config_path)
    try:
        results = gradcheck.run_gradcheck(
            seed=extras["gradcheck_seed"], corrupt=extras["gradcheck_corrupt"]
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(gradcheck.format_results(results))
    failing = [r for r in results if not r.passed]
    if failing:
        names = ", ".join(r.name for r in failing)
        print(f"FAILED checks: {names}", file=sys.stderr)
        return 1
    return 0


def cmd_compare(config_path: str, out_dir: str) -> int:
    text, cfg, extras = _read_config(config_path)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    started = _now()
    outputs = {"summary_csv": os.path.join(out_dir, "summary.csv")}
    _write_manifest(manifest_path, config_path, text, cfg.seed, outputs, started, None)
    result = compare_estimators(cfg, extras["n_seeds"])
    for run in result.runs:
        stem = os.path.join(out_dir, f"metrics_{run.estimator}_seed{run.seed}")
        _write_metrics(run.history, stem + ".csv", stem + ".jsonl")
        outputs[f"{run.estimator}_seed{run.seed}"] = stem + ".csv"
        if run.error:
            print(f"run {run.estimator}/seed{run.seed} aborted: {run.error}", file=sys.stderr)
    ratio = result.summary["time_ratio_path_over_total"]
    with open(outputs["summary_csv"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["estimator", "n_runs", "n_ok", "final_ess_mean", "final_ess_sd",
             "mean_wall_ms", "time_ratio_path_over_total"]
        )
        for est in ("path", "total"):
            s = result.summary[est]
            sd = "" if not np.isfinite(s["final_ess_sd"]) else s["final_ess_sd"]
            writer.writerow(
                [est, s["n_runs"], s["n_ok"], s["final_ess_mean"], sd,
                 s["mean_wall_ms"], ratio]
            )
    _write_manifest(manifest_path, config_path, text, cfg.seed, outputs, started, _now())
    print(json.dumps(result.summary, indent=2))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathflow",
        description="Continuous normalizing flows with path-gradient training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override run.seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="run the derivative oracle suite")
    p.add_argument("--config", required=True)

    p = sub.add_parser("compare", help="paired path-vs-total comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.samples, args.seed)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.config)
        if args.command == "compare":
            return cmd_compare(args.config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

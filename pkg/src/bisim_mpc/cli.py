"""Operator surface: ``train``, ``eval``, ``bisim-verify``, ``bench-loss``
and ``plot`` subcommands.

Configuration is a YAML tree with sections ``train``, ``model``,
``coeffs``, ``planner``, ``distractors``; any leaf can be overridden on
the command line with ``--section.key value``. The fully resolved config
is written into the run manifest.

Exit codes: 0 success / bounds pass, 1 usage error, 2 runtime failure,
3 bound violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np
import yaml

from . import losses as L
from .bisim_oracle import (BisimWeights, pi_bisim_metric, value_iteration,
                           greedy_policy_table, epsilon_cluster,
                           verify_theorem_value_bound,
                           verify_theorem_return_bound, verify_reward_bound)
from .envs import DistractorConfig, load_mdp, random_mdp, save_mdp, MdpParseError
from .models import ModelConfig, ModelSet
from .planner import PlanConfig
from .trainer import TrainConfig, Trainer, evaluate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_BOUND = 3

OUTPUT_ROOT_ENV = "BISIM_MPC_OUTPUT_ROOT"


class UsageError(ValueError):
    pass


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_overrides(extras: list[str]) -> dict[str, object]:
    """['--planner.population', '512', ...] -> {'planner.population': 512}."""
    out = {}
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--") or "." not in key:
            raise UsageError(f"unrecognized argument {key!r}")
        if "=" in key:
            k, v = key[2:].split("=", 1)
            out[k] = _coerce(v)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise UsageError(f"missing value for {key!r}")
            out[key[2:]] = _coerce(extras[i + 1])
            i += 2
    return out


def _apply_section(cls, file_section: dict, overrides: dict, prefix: str):
    kwargs = dict(file_section or {})
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section == prefix:
            kwargs[key] = value
    valid = {f.name for f in fields(cls)}
    unknown = set(kwargs) - valid
    if unknown:
        raise UsageError(f"unknown {prefix} config keys: {sorted(unknown)}")
    return kwargs


def resolve_configs(config_path: str | None, overrides: dict):
    """Defaults <- YAML file <- dotted CLI overrides."""
    tree = {}
    if config_path:
        if not os.path.exists(config_path):
            raise UsageError(f"config file not found: {config_path}")
        with open(config_path) as fh:
            try:
                tree = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise UsageError(f"invalid config file {config_path}: {exc}")
    train_kw = _apply_section(TrainConfig, tree.get("train", {}), overrides, "train")
    model_kw = _apply_section(ModelConfig, tree.get("model", {}), overrides, "model")
    model_kw = {k: v for k, v in model_kw.items()
                if k in ("latent_dim", "hidden_dim", "n_layers")}
    coeff_kw = _apply_section(L.LossCoefficients, tree.get("coeffs", {}), overrides, "coeffs")
    plan_kw = _apply_section(PlanConfig, tree.get("planner", {}), overrides, "planner")
    dis_section = tree.get("distractors")
    dis_kw = _apply_section(DistractorConfig, dis_section or {}, overrides, "distractors")
    use_distractors = bool(dis_section) or any(k.startswith("distractors.") for k in overrides)
    return (TrainConfig(**train_kw), model_kw, L.LossCoefficients(**coeff_kw),
            PlanConfig(**plan_kw),
            DistractorConfig(**dis_kw) if use_distractors else None)


def desk_plan_config(**kw) -> PlanConfig:
    """Planner defaults scaled to single-CPU desk runs."""
    base = dict(horizon=3, population=128, elites=16, iterations=4,
                horizon_start=1)
    base.update(kw)
    return PlanConfig(**base)


# -- subcommands ---------------------------------------------------------

def cmd_train(args, overrides) -> int:
    train_cfg, model_kw, coeffs, plan_cfg, distractors = resolve_configs(
        args.config, overrides)
    out_root = args.out or os.environ.get(OUTPUT_ROOT_ENV, "runs")
    seeds = [int(s) for s in str(args.seed).split(",")] if args.seed is not None \
        else [train_cfg.seed]
    for seed in seeds:
        cfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
        out_dir = os.path.join(out_root, f"{cfg.task}_seed{seed}")
        trainer = Trainer(cfg, model_kw, coeffs, plan_cfg, distractors, out_dir)
        print(f"[train] task={cfg.task} seed={seed} steps={cfg.total_steps} "
              f"-> {out_dir}")
        trainer.run()
        if trainer.eval_history:
            step, mean, std = trainer.eval_history[-1]
            print(f"[train] final eval at step {step}: {mean:.1f} +- {std:.1f}")
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    run_dir = args.run_dir
    manifest_path = os.path.join(run_dir, "manifest.json")
    model_path = os.path.join(run_dir, f"model_{args.tag}.npz")
    policy_path = os.path.join(run_dir, f"policy_{args.tag}.npz")
    for path in (manifest_path, model_path, policy_path):
        if not os.path.exists(path):
            raise UsageError(f"missing run artifact: {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    train_cfg = TrainConfig(**manifest["train"])
    plan_cfg = PlanConfig(**manifest["planner"])
    coeffs = L.LossCoefficients(**manifest["coeffs"])
    distractors = (DistractorConfig(**manifest["distractors"])
                   if manifest.get("distractors") else None)
    model_kw = {k: v for k, v in manifest["model"].items()
                if k in ("latent_dim", "hidden_dim", "n_layers")}
    trainer = Trainer(train_cfg, model_kw, coeffs, plan_cfg,
                      distractors, out_dir=None)
    trainer.load(model_path, policy_path)
    mean, std = evaluate(trainer.models, plan_cfg, trainer._env_factory,
                         args.episodes, args.eval_seed, train_cfg=train_cfg)
    print(f"[eval] {args.episodes} episodes: return {mean:.2f} +- {std:.2f}")
    return EXIT_OK


def _verify_one(mdp, c, epsilon, horizon, tol):
    reports = [
        verify_theorem_value_bound(mdp, c, epsilon, tol),
        verify_theorem_return_bound(mdp, c, epsilon, horizon, tol),
        verify_reward_bound(mdp, c, epsilon, tol),
    ]
    return reports


def cmd_bisim_verify(args, overrides) -> int:
    if overrides:
        raise UsageError(f"unexpected arguments: {sorted(overrides)}")
    mdps = []
    if args.mdp:
        try:
            mdps.append(("file:" + args.mdp, load_mdp(args.mdp)))
        except MdpParseError as exc:
            print(f"[bisim-verify] parse error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    elif args.random:
        n, a, n_seeds = args.random
        for seed in range(n_seeds):
            mdps.append((f"random(n={n},A={a},seed={seed})",
                         random_mdp(n, a, seed=seed, gamma=args.gamma)))
    else:
        raise UsageError("provide an MDP file or --random N A SEEDS")

    rows = []
    all_pass = True
    for label, mdp in mdps:
        for report in _verify_one(mdp, args.c, args.epsilon, args.horizon, args.tol):
            ok = report.passed
            all_pass &= ok
            rows.append({"mdp": label, "bound": report.name,
                         "lhs": report.lhs, "rhs": report.rhs,
                         "pass": ok, **{f"detail_{k}": v
                                        for k, v in report.details.items()}})
            print(f"[bisim-verify] {label} {report.name}: "
                  f"lhs={report.lhs:.6g} rhs={report.rhs:.6g} "
                  f"{'PASS' if ok else 'FAIL'}")
    if args.report:
        os.makedirs(os.path.dirname(args.report) or ".", exist_ok=True)
        keys = sorted({k for r in rows for k in r})
        with open(args.report, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
        # Companion plain-text dump of the first MDP's metric and clusters.
        label, mdp = mdps[0]
        v, greedy = value_iteration(mdp)
        d, _ = pi_bisim_metric(mdp, greedy_policy_table(greedy, mdp.n_actions),
                               BisimWeights.convex(args.c))
        agg = epsilon_cluster(mdp, d, args.epsilon)
        txt = args.report.rsplit(".", 1)[0] + ".txt"
        with open(txt, "w") as fh:
            fh.write(f"mdp: {label}\nepsilon: {args.epsilon}\nc: {args.c}\n")
            fh.write(f"clusters: {agg.phi.tolist()}\n")
            fh.write(f"encoder_error: {agg.encoder_error!r}\n")
            fh.write("metric:\n")
            for row in d:
                fh.write(" ".join(f"{x:.9f}" for x in row) + "\n")
    return EXIT_OK if all_pass else EXIT_BOUND


def cmd_bench_loss(args, overrides) -> int:
    if args.repeats <= 0:
        raise UsageError("--repeats must be positive")
    from .bench import run_benchmark
    result = run_benchmark(batch=args.batch, horizon=args.horizon,
                           workers=[int(w) for w in args.workers.split(",")],
                           repeats=args.repeats, seed=args.bench_seed)
    print(result.table())
    if result.max_rel_disagreement > 1e-12:
        print("[bench-loss] worker-count disagreement above 1e-12",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plot(args, overrides) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not os.path.exists(args.metrics):
        raise UsageError(f"metrics file not found: {args.metrics}")
    rows = list(csv.DictReader(open(args.metrics)))

    def series(col):
        xs, ys = [], []
        for r in rows:
            if r.get(col):
                xs.append(float(r["env_step"]))
                ys.append(float(r[col]))
        return xs, ys

    fig, axes = plt.subplots(2, 3, figsize=(14, 7))
    panels = ["total", "reward_loss", "value_loss", "consistency_loss",
              "bisim_loss", "grad_norm"]
    for ax, col in zip(axes.flat, panels):
        xs, ys = series(col)
        ax.plot(xs, ys, lw=0.7)
        ax.set_title(col)
        ax.set_xlabel("env step")
    ex, ey = series("eval_return_mean")
    if ex:
        ax2 = axes.flat[0].twinx()
        ax2.plot(ex, ey, "r.-", label="eval return")
        ax2.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"[plot] wrote {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisim-mpc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training to the env-step budget")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", default=None,
                   help="comma list; each seed trains in its own directory")
    p.add_argument("--out", default=None, help="output root (or $%s)" % OUTPUT_ROOT_ENV)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpointed run")
    p.add_argument("run_dir")
    p.add_argument("--tag", default="final")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--eval-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bisim-verify", help="check the metric-based bounds")
    p.add_argument("--mdp", default=None, help="plain-text MDP file")
    p.add_argument("--random", nargs=3, type=int, default=None,
                   metavar=("N", "A", "SEEDS"))
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--c", type=float, default=0.5)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--report", default=None, help="CSV report path")
    p.set_defaults(func=cmd_bisim_verify)

    p = sub.add_parser("bench-loss", help="time per-step-parallel vs sequential loss")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--workers", default="1,4")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--bench-seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_loss)

    p = sub.add_parser("plot", help="render a metrics CSV to an image")
    p.add_argument("metrics")
    p.add_argument("--out", default="metrics.png")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extras)
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure with a nonzero exit
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

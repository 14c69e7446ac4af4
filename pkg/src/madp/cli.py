"""Command-line entry point: ``madp generate|train|rollout|eval``.

Every command writes into an output directory (``--out``, falling back to
``$MADP_OUTPUT_DIR`` and then ``./madp-out``). Exit codes: 0 success,
1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalharness as ev
from .diffusion import MADPModel, ModelConfig
from .ndtensor import ContractError
from .train import Dataset, TrainConfig, generate_dataset, read_history, train, write_history
from .world import WorldConfig

OUTPUT_ENV = "MADP_OUTPUT_DIR"
SUITES = ("sigma", "init", "scale", "fan")
EXPERTS = ("clairvoyant", "dcvt", "random", "zero")

log = logging.getLogger("madp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or "madp-out")


def _load_json_config(path, cls, default):
    if path is None:
        return default
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        return cls.from_json(p)
    except (TypeError, ValueError, KeyError) as exc:
        raise ValueError(f"invalid config {p}: {exc}") from exc


def _world(args) -> WorldConfig:
    return _load_json_config(args.config, WorldConfig, WorldConfig.desk())


def _seeds(args) -> list:
    return list(range(args.seed, args.seed + args.seeds))


def _policy(name, args):
    if name == "madp":
        if not args.checkpoint:
            raise UsageError("policy 'madp' needs --checkpoint")
        model = MADPModel.load(Path(args.checkpoint) / "model")
        return ev.MADPPolicy(model, decentralized=args.decentralized, steps=args.sample_steps, eta=args.eta)
    return ev.expert_policy(name)


def _write_manifest(out: Path, command: str, args, **extra):
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    ev.write_manifest(out / "manifest.json", command=command, flags=flags, **extra)


# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    world = _world(args)
    if args.examples < 1:
        raise UsageError("--examples must be positive")
    ds = generate_dataset(world, args.examples, seed=args.seed, rollout_steps=args.rollout_steps,
                          rows_per_rollout=args.rows_per_rollout)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "dataset")
    log.info("wrote %d examples to %s", len(ds), out)


def cmd_train(args) -> None:
    ds_path = Path(args.dataset)
    if not ds_path.with_suffix(".json").is_file() and (ds_path / "dataset.json").is_file():
        ds_path = ds_path / "dataset"
    if not ds_path.with_suffix(".json").is_file():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    model_cfg = _load_json_config(args.model_config, ModelConfig, ModelConfig.desk())
    train_cfg = _load_json_config(args.train_config, TrainConfig, TrainConfig())
    if args.seed is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": args.seed})
    model, start, history = None, 0, []
    if args.resume:
        ckpt = Path(args.resume)
        model = MADPModel.load(ckpt / "model")
        model_cfg = model.config
        history = read_history(ckpt / "history.csv")
        start = history[-1][0] if history else 0
    ds = Dataset.load(ds_path)

    def progress(epoch, tr, va):
        log.info("epoch %d train %.5f val %.5f", epoch, tr, va)

    res = train(ds, model_cfg, train_cfg, model=model, start_epoch=start, history=history, progress=progress)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    res.model.save(out / "model")
    write_history(res.history, out / "history.csv")
    _write_manifest(out, "train", args, best_epoch=res.best_epoch, best_val=res.best_val,
                    train_config=train_cfg.to_dict(), model_config=model_cfg.to_dict())


def cmd_rollout(args) -> None:
    world = _world(args)
    name = "madp" if args.checkpoint and not args.policy else (args.policy or "clairvoyant")
    policy = _policy(name, args)
    recs = ev.run_rollouts(policy, world, args.steps, _seeds(args), scenario=args.scenario, jobs=args.jobs)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_rollouts_csv(recs, out / "rollouts.csv")
    _write_manifest(out, "rollout", args, world=world, seeds=_seeds(args))


def _eval_policies(args) -> list:
    names = args.policy or (["clairvoyant", "dcvt"] + (["madp"] if args.checkpoint else []))
    return [_policy(n, args) for n in names]


def cmd_eval(args) -> None:
    world = _world(args)
    seeds = _seeds(args)
    out = _out_dir(args)
    if args.suite == "sigma":
        ranges = args.range or [list(ev.TRAINING_SIGMA_RANGE)]
        for lo, hi in ranges:
            if not 0 < lo <= hi:
                raise UsageError(f"bad --range {lo} {hi}")
        rows = ev.sigma_sweep(_eval_policies(args), world, ranges, seeds, args.steps, args.jobs)
        for r in rows:
            r["outliers"] = ";".join(repr(v) for v in r["outliers"])
        cols = ["sigma_min", "sigma_max", "policy", "n", "min", "whisker_lo", "q1", "median", "q3",
                "whisker_hi", "max", "mean", "outliers"]
        out.mkdir(parents=True, exist_ok=True)
        ev.write_rows_csv(rows, out / "sigma.csv", cols)
    elif args.suite == "init":
        rows = ev.init_scenarios(_eval_policies(args), world, args.scenarios, seeds, args.steps, args.jobs)
        for r in rows:
            r["x_min"], r["x_max"], r["y_min"], r["y_max"] = r["bounds"]
        out.mkdir(parents=True, exist_ok=True)
        ev.write_rows_csv(rows, out / "init.csv", ["scenario", "policy", "mean", "stderr", "n", "x_min", "x_max", "y_min", "y_max"])
    elif args.suite == "scale":
        names = args.policy or (["madp"] if args.checkpoint else ["dcvt"])
        if len(names) != 1:
            raise UsageError("scale suite takes exactly one --policy")
        policy = _policy(names[0], args)
        baseline = _policy(args.baseline, args)
        rows = ev.scalability_grid(policy, baseline, world, args.n_values, args.f_values, seeds, args.steps, args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        ev.write_rows_csv(rows, out / "scale.csv",
                          ["N", "F", "policy", "baseline", "policy_mean", "baseline_mean", "percent_difference"])
    else:  # fan
        if not args.checkpoint:
            raise UsageError("fan suite needs --checkpoint")
        model = MADPModel.load(Path(args.checkpoint) / "model")
        runs = ev.trajectory_fan(model, world, args.robot, args.runs, args.steps, seed=args.seed,
                                 eta=1.0 if args.eta is None else args.eta, steps=args.sample_steps)
        rows = [{"run": i, "timestep": t, "x": float(p[0]), "y": float(p[1])}
                for i, r in enumerate(runs) for t, p in enumerate(r.trajectory)]
        out.mkdir(parents=True, exist_ok=True)
        ev.write_rows_csv(rows, out / "fan.csv", ["run", "timestep", "x", "y"])
        ev.write_rows_csv([{"run": i, "final_cost": r.final_cost} for i, r in enumerate(runs)],
                          out / "fan_costs.csv", ["run", "final_cost"])
    _write_manifest(out, f"eval-{args.suite}", args, world=world, seeds=seeds)


# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _common(p, seeds_default=None):
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./madp-out)")
    p.add_argument("--seed", type=int, default=0, help="base seed; all randomness derives from it")
    p.add_argument("--config", help="world config JSON (default: the desk preset)")
    if seeds_default is not None:
        p.add_argument("--seeds", type=int, default=seeds_default, help="number of evaluation seeds")
        p.add_argument("--jobs", type=int, default=1, help="parallel rollout workers")


def _sampler_flags(p):
    p.add_argument("--checkpoint", help="training output directory holding a MADP model")
    p.add_argument("--decentralized", action="store_true", help="run the sampler per robot over its neighbourhood")
    p.add_argument("--sample-steps", type=int, default=None, help="DDIM steps (default: from the model config)")
    p.add_argument("--eta", type=float, default=None, help="DDIM stochasticity (default: from the model config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="madp", description="Multi-agent diffusion policy for coverage control.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="roll out the clairvoyant expert and record a dataset")
    _common(g)
    g.add_argument("--examples", type=int, default=2000, help="number of dataset rows")
    g.add_argument("--rollout-steps", type=int, default=150, help="length of each expert rollout")
    g.add_argument("--rows-per-rollout", type=int, default=20, help="rows sampled from each rollout")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a MADP model on a dataset")
    t.add_argument("--dataset", required=True, help="dataset directory or manifest stem")
    t.add_argument("--model-config", help="model config JSON (default: the desk preset)")
    t.add_argument("--train-config", help="training config JSON (default: paper hyperparameters)")
    t.add_argument("--resume", help="previous training output directory to continue from")
    t.add_argument("--seed", type=int, default=None, help="override the training config seed")
    t.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./madp-out)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll out a policy and record per-step coverage cost")
    _common(r, seeds_default=20)
    r.add_argument("--policy", "--expert", dest="policy", choices=EXPERTS + ("madp",), help="policy to run")
    r.add_argument("--scenario", choices=sorted(ev.SCENARIOS), default="uniform", help="launch region")
    r.add_argument("--steps", type=int, default=150, help="rollout horizon T")
    _sampler_flags(r)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="run an experiment suite")
    _common(e, seeds_default=20)
    e.add_argument("--suite", required=True, choices=SUITES, help="experiment family")
    e.add_argument("--policy", action="append", choices=EXPERTS + ("madp",), help="policy to evaluate (repeatable)")
    e.add_argument("--steps", type=int, default=150, help="rollout horizon T (fan: trajectory length)")
    e.add_argument("--range", action="append", nargs=2, type=float, metavar=("MIN", "MAX"),
                   help="sigma range for the sigma suite (repeatable)")
    e.add_argument("--scenarios", nargs="+", choices=sorted(ev.SCENARIOS), default=["uniform", "square", "line"],
                   help="launch scenarios for the init suite")
    e.add_argument("--n-values", type=_int_list, default=[2, 4, 8], help="robot counts for the scale suite")
    e.add_argument("--f-values", type=_int_list, default=[2, 4, 8], help="feature counts for the scale suite")
    e.add_argument("--baseline", choices=EXPERTS, default="dcvt", help="baseline for the scale suite")
    e.add_argument("--robot", type=int, default=0, help="robot index traced by the fan suite")
    e.add_argument("--runs", type=int, default=20, help="number of fan runs")
    _sampler_flags(e)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"madp: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ContractError, RuntimeError) as exc:
        print(f"madp: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

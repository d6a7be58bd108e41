"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``check``, ``samplesize`` and ``oracle``.
Exit status is 0 on success, 1 on a usage error (bad flags, unknown
environment, malformed formula) and 2 on a runtime error (unreadable or
invalid config, corrupted checkpoint, I/O failure).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .env import ChainMdpSpec, ConveyorWorldSpec, Environment, load_env, make_env
from .harness import TrainConfig, evaluate, train
from .logic import FormulaSyntaxError, UnsupportedFormulaError, bounded_always, parse_state_formula
from .smc import BoundSide, Mode, SmcConfig, check, env_traces, exact_mu_oracle, required_samples

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

BUILTIN_ENVS = {
    "conveyor": lambda: ConveyorWorldSpec().to_dict(),
    "conveyor-slip": lambda: ConveyorWorldSpec(slip_prob=0.1).to_dict(),
    "chain": lambda: ChainMdpSpec().to_dict(),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _env(spec: str) -> Environment:
    if spec in BUILTIN_ENVS:
        return make_env(BUILTIN_ENVS[spec]())
    if not Path(spec).exists():
        raise UsageError(f"unknown environment {spec!r}: not a builtin ({', '.join(BUILTIN_ENVS)}) or a file")
    return load_env(spec)


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not positive")
    return v


def _print_json(doc: Any) -> None:
    print(json.dumps(doc, sort_keys=True))


def cmd_train(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = TrainConfig.from_dict(doc)
    res = train(cfg, out_dir=args.out)
    last = res.metrics[-1] if res.metrics else None
    _print_json({
        "episodes": len(res.metrics),
        "iterations": res.iterations,
        "cum_violations": last.cum_violations if last else 0,
        "out": str(args.out),
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    summary = evaluate(
        args.checkpoint, args.episodes, seed=args.seed, shield=args.shield == "on", policy=args.policy
    )
    _print_json(summary)
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    env = _env(args.env)
    phi = parse_state_formula(args.formula)
    cfg = SmcConfig(
        epsilon_safety=args.eps_safety,
        epsilon_approx=args.eps_approx,
        delta=args.delta,
        m=args.m,
        horizon=args.horizon,
        mode=Mode(args.mode),
    )
    rng = np.random.default_rng(args.seed)
    est = check(env_traces(env, args.horizon, rng, start=args.state), bounded_always(args.horizon, phi), cfg)
    _print_json(est.to_dict())
    return EXIT_OK


def cmd_samplesize(args: argparse.Namespace) -> int:
    print(required_samples(args.eps_approx, args.delta, BoundSide(args.side)))
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    env = _env(args.env)
    if not 0 <= args.state < env.num_states:
        raise UsageError(f"state {args.state} out of range [0, {env.num_states})")
    table = env.enumerate_transitions()
    phi = parse_state_formula(args.formula)
    labelling = [env.labels(s) for s in range(env.num_states)]
    mu = exact_mu_oracle(table.probs, labelling, phi, args.horizon, args.state)
    _print_json({"mu": mu, "horizon": args.horizon, "state": args.state})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="approxshield", description="Approximate look-ahead shielding for safe exploration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run shielded training")
    t.add_argument("--config", help="JSON config; unknown keys are rejected")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint without learning")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=_nonneg, default=100)
    e.add_argument("--shield", choices=("on", "off"), default="on")
    e.add_argument("--policy", choices=("task", "safe"), default="task", help="acting policy when unshielded")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="statistically check G<=n formula on an environment")
    c.add_argument("--env", required=True, help=f"JSON file or one of {', '.join(BUILTIN_ENVS)}")
    c.add_argument("--formula", required=True, help="state formula that must hold at every step")
    c.add_argument("--horizon", type=_nonneg, required=True)
    c.add_argument("--m", type=_positive, help="sample count (default from the Hoeffding bound)")
    c.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.NO_FALSE_POSITIVE.value)
    c.add_argument("--eps-safety", type=_unit, default=0.1)
    c.add_argument("--eps-approx", type=_unit, default=0.09)
    c.add_argument("--delta", type=_unit, default=0.1)
    c.add_argument("--state", type=_nonneg, help="start state (default: environment reset)")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("samplesize", help="Hoeffding sample size")
    s.add_argument("--eps-approx", type=_unit, required=True)
    s.add_argument("--delta", type=_unit, required=True)
    s.add_argument("--side", choices=[b.value for b in BoundSide], default=BoundSide.TWO_SIDED.value)
    s.set_defaults(func=cmd_samplesize)

    o = sub.add_parser("oracle", help="exact G<=n probability under a uniform policy")
    o.add_argument("--env", required=True, help=f"JSON file or one of {', '.join(BUILTIN_ENVS)}")
    o.add_argument("--formula", required=True)
    o.add_argument("--horizon", type=_nonneg, required=True)
    o.add_argument("--state", type=_nonneg, required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FormulaSyntaxError, UnsupportedFormulaError) as exc:
        print(f"approxshield: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as exc:
        print(f"approxshield: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

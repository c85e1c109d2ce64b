"""Command-line entry points.

``ctpo run --config cfg.txt [--seed N --algo X --env Y --out DIR]`` executes
an experiment (flags override config keys); ``ctpo oracle`` prints the
closed-form constants of the scalar LQ environment for the configured (or
default) parameters.

Exit codes: 0 success, 2 configuration error, 3 all seeds diverged (or a
verification check failed).
"""

from __future__ import annotations

import argparse
import sys

from .harness import ParseError, parse_config, run
from .lq import solve_lq
from .sde import ConfigError, LQParams


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctpo",
                                     description="continuous-time policy optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a training or verification run")
    p_run.add_argument("--config", default=None, help="path to a key = value config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed list")
    p_run.add_argument("--algo", default=None, help="override the algorithm")
    p_run.add_argument("--env", default=None, help="override the environment")
    p_run.add_argument("--out", default=None, help="override the output directory")

    p_oracle = sub.add_parser("oracle", help="print the LQ closed-form constants")
    p_oracle.add_argument("--config", default=None,
                          help="optional config file supplying LQ parameters")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "oracle":
            if args.config is not None:
                with open(args.config, encoding="utf-8") as fh:
                    cfg = parse_config(fh.read())
                params = cfg.lq_params
            else:
                params = LQParams()
            sol = solve_lq(params)
            print(f"k0 = {sol.k0!r}")
            print(f"k1 = {sol.k1!r}")
            print(f"k2 = {sol.k2!r}")
            print(f"policy_mean_slope = {sol.mean_slope!r}")
            print(f"policy_mean_intercept = {sol.mean_intercept!r}")
            print(f"policy_variance = {sol.variance!r}")
            print(f"theta3_for_variance_reading = {sol.theta3!r}")
            return 0

        text = ""
        if args.config is not None:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        overrides = {"seeds": args.seed, "algo": args.algo, "env": args.env,
                     "out": args.out}
        cfg = parse_config(text, overrides=overrides)
        return run(cfg)
    except (ParseError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

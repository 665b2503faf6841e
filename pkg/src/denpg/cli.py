"""Command-line front end: ``denpg run | eval | topology``.

Exit codes: 0 success, 1 invalid input/config, 2 a run failed.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import ConfigError, DenpgError
from .experiment import eval_grid, load_checkpoints, parse_config, run_battery
from .optimizer import make_envs
from .topology import build_topology, load_edge_file

EXIT_OK, EXIT_VALIDATION, EXIT_RUN = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    result = run_battery(cfg, out=args.out, plots=True if args.plots else None)
    for path in result.runs:
        print(path)
    for name, err in sorted(result.failures.items()):
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUN


def _cmd_eval(args) -> int:
    cfg = parse_config(args.envs)
    tpl = cfg.template
    envs, _ = make_envs(tpl.env, tpl.n_agents, tpl.H, tpl.gamma)
    unique = []
    for env in envs:
        if not any(env is u for u in unique):
            unique.append(env)
    ckpts = load_checkpoints(args.checkpoints)
    if not ckpts:
        print(f"no .params files in {args.checkpoints}", file=sys.stderr)
        return EXIT_VALIDATION
    grid = eval_grid([(p, th) for _, p, th in ckpts], unique, episodes=args.episodes, seed=args.seed,
                     row_names=[name for name, _, _ in ckpts], col_names=[f"env {k + 1}" for k in range(len(unique))])
    text = grid.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_topology(args) -> int:
    edges = load_edge_file(args.edges_file) if args.edges_file else None
    net = build_topology(args.kind, args.n, edges)
    if args.print:
        with np.printoptions(precision=6, suppress=True, linewidth=120):
            print(net.W)
    print(f"rho = {net.rho:.12f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denpg", description="Decentralized momentum natural policy gradient")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment battery from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (overrides experiment.out)")
    p.add_argument("--plots", action="store_true", help="write SVG plots")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate saved policies across environments")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--envs", required=True, help="config file describing the evaluation environments")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the grid CSV here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("topology", help="print a mixing matrix and its spectral quantity")
    p.add_argument("--kind", required=True, choices=["ring", "fully_connected", "bipartite", "custom"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--edges-file", default=None)
    p.add_argument("--print", action="store_true", help="print W")
    p.set_defaults(func=_cmd_topology)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DenpgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

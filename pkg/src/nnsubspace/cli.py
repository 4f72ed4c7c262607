"""Command-line interface.

Subcommands:

* ``run``            train one experiment and write history/summary/grid/ckpt
* ``quad table``     print nodes/weights of a quadrature rule as CSV
* ``problems list``  show the problem catalog and test labels
* ``check``          run the built-in invariant suites (nonzero exit on failure)
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness, problems, quadrature

_LOSS_ALIASES = {
    "ritz": "ritz",
    "residual": "residual",
    "posterior": "interface_posterior",
    "interface_posterior": "interface_posterior",
}


def _cmd_run(args) -> int:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    rule_overrides = overrides.pop("rules", None)
    name = args.test or args.experiment
    if name is None:
        raise SystemExit("run: provide --test/--experiment (e.g. --test 1.1)")
    loss = _LOSS_ALIASES[args.loss] if args.loss else None
    report, state, paths = harness.run_experiment(
        name,
        scale=args.scale,
        out_dir=args.out,
        seed=args.seed,
        loss=loss,
        config_overrides=overrides,
        rule_overrides=rule_overrides,
    )
    print(
        f"{name} [{args.scale}] e_E={report.e_E:.6e} e_L2={report.e_L2:.6e} "
        f"e_test={report.e_test:.6e}"
    )
    if paths:
        print("artifacts:", ", ".join(str(p) for p in paths.values()))
    return 0


def _cmd_quad(args) -> int:
    if args.kind == "legendre":
        rule = quadrature.gauss_legendre(args.n)
    elif args.kind == "lobatto":
        rule = quadrature.gauss_lobatto(args.n)
    elif args.kind == "jacobi":
        rule = quadrature.gauss_jacobi(args.n, args.alpha, args.beta)
    else:
        raise SystemExit(f"unknown kind {args.kind!r}")
    print("index,node,weight")
    for i, (x, w) in enumerate(zip(rule.nodes, rule.weights)):
        print(f"{i},{x:.17g},{w:.17g}")
    return 0


def _cmd_problems(args) -> int:
    print(problems.list_problems())
    return 0


def _cmd_check(args) -> int:
    failures = harness.run_check(verbose=True)
    print(f"{failures} failure(s)")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nnsubspace",
        description="Adaptive neural-network-subspace Galerkin solver for 2D elliptic PDEs",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one experiment and write artifacts")
    run.add_argument("--problem", help="catalog name (informational; tests imply it)")
    run.add_argument("--test", help="paper test label: 1.1, 1.2, 2.1-2.3, 3.1, 4.1, 4.2, singular, circle, manufactured")
    run.add_argument("--experiment", help="alias for --test")
    run.add_argument("--loss", choices=sorted(_LOSS_ALIASES), default=None)
    run.add_argument("--scale", choices=("desk", "paper"), default="desk")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--config", help="JSON file with TrainConfig overrides (key 'rules' for rule overrides)")
    run.add_argument("--out", help="output directory for history.csv / summary.json / grid.csv / params.ckpt")
    run.set_defaults(func=_cmd_run)

    quad = sub.add_parser("quad", help="quadrature utilities")
    quad_sub = quad.add_subparsers(dest="quad_command", required=True)
    table = quad_sub.add_parser("table", help="print nodes/weights as CSV")
    table.add_argument("--kind", choices=("legendre", "lobatto", "jacobi"), required=True)
    table.add_argument("--n", type=int, required=True)
    table.add_argument("--alpha", type=float, default=0.0)
    table.add_argument("--beta", type=float, default=0.0)
    table.set_defaults(func=_cmd_quad)

    prob = sub.add_parser("problems", help="problem catalog")
    prob_sub = prob.add_subparsers(dest="problems_command", required=True)
    lst = prob_sub.add_parser("list", help="list problems and test labels")
    lst.set_defaults(func=_cmd_problems)

    chk = sub.add_parser("check", help="run the built-in invariant suites")
    chk.set_defaults(func=_cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line interface.

Exit status: 0 on success, 2 on invalid input or failed assumption checks,
3 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bsde, cell as cellmod, harness, pde, sde
from .errors import NumericalError, RhomogError, ValidationError
from .problem import validate_assumptions

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _emit(payload: dict, args, name: str):
    text = json.dumps(harness._clean(payload), sort_keys=True, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    sys.stdout.write(text)


def _write_csv(args, name, header, rows):
    if not args.out:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _floats(text):
    return [float(v) for v in text.split(",")] if text else []


def cmd_validate(args):
    problem = harness.resolve_problem(args.config)
    report = validate_assumptions(problem, samples=args.samples, rng_seed=args.seed)
    _emit(report.to_dict(), args, "validate.json")
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_cell(args):
    problem = harness.resolve_problem(args.config)
    x = _floats(args.x) or list(np.asarray(problem.domain.center))
    cs = cellmod.solve_cell(problem, x, N=args.N)
    cellmod.effective_tensors(problem, cs)
    _emit(cs.to_dict(), args, "cell.json")
    nodes = cs.grid.nodes().reshape(cs.grid.size, -1)
    _write_csv(args, "cell.csv", [f"y{i + 1}" for i in range(cs.grid.d_cell)]
               + ["m"] + [f"b_hat{i + 1}" for i in range(problem.d)],
               [[repr(float(v)) for v in nd] + [repr(float(m))] + [repr(float(v)) for v in b]
                for nd, m, b in zip(nodes, cs.m, cs.b_hat)])
    return EXIT_OK


def _bundle(args, problem):
    x0 = _floats(args.x0) or list(np.asarray(problem.domain.center))
    if args.eps is None:
        cfg = harness.ExperimentConfig(problem=problem, t=args.t, x0=x0, epsilons=[],
                                       n_paths=args.paths, seed=args.seed, threads=args.threads,
                                       cell_N=args.N)
        fieldc = harness.homogenized_field(problem, cfg)
        return sde.simulate_homogenized(problem.domain, fieldc.A0, fieldc.C0, fieldc.gamma, x0,
                                        args.t, args.dt or 1e-3, args.paths, args.seed,
                                        record_every=args.record_every, threads=args.threads)
    dt = args.dt or 0.005 * args.eps ** 2
    return sde.simulate_two_scale(problem, args.eps, x0, args.t, dt, args.paths, args.seed,
                                  record_every=args.record_every, threads=args.threads)


def cmd_sde(args):
    problem = harness.resolve_problem(args.config)
    b = _bundle(args, problem)
    mom = sde.moment_diagnostics(b)
    payload = {"epsilon": b.epsilon, "paths": b.n_paths, "steps": b.n_steps, "dt": b.dt,
               "EG": mom.mean_local_time, "EG_stderr": mom.mean_local_time_stderr,
               "moments": mom.to_dict(), "skorokhod_defect": sde.skorokhod_defect(b, problem.domain),
               "scheme": b.scheme}
    _emit(payload, args, "sde.json")
    G = b.G
    rows = []
    for path in range(min(10, b.n_paths)):
        for k in range(b.n_steps + 1):
            rows.append([path, k, repr(float(b.times[k]))]
                        + [repr(float(v)) for v in b.X[k, path]] + [repr(float(G[k, path]))])
    _write_csv(args, "sde_paths.csv",
               ["path", "k", "t"] + [f"x{i + 1}" for i in range(problem.d)] + ["G"], rows)
    return EXIT_OK


def cmd_solve(args):
    problem = harness.resolve_problem(args.config)
    b = _bundle(args, problem)
    basis = bsde.RegressionBasis(args.deg, args.psi)
    if args.scheme == "penalized":
        sol = bsde.solve_penalized(b, problem, args.n, basis, implicit=not args.explicit)
    else:
        sol = bsde.solve_reflected(b, problem, basis)
    _emit(sol.summary(), args, "solve.json")
    H = np.stack([problem.h_at(b.times[k], b.X[k]) for k in range(b.n_steps + 1)])
    _write_csv(args, "solve_steps.csv", ["k", "mean_Y", "mean_K", "obstacle_violation"],
               [[k, repr(y), repr(kk), repr(v)] for k, y, kk, v in sol.per_step(H)])
    return EXIT_OK


def cmd_oracle(args):
    problem = harness.resolve_problem(args.config)
    if problem.d != 1:
        raise ValidationError("the finite-difference oracle is one-dimensional")
    cfg = harness.ExperimentConfig(problem=problem, t=args.t, epsilons=[], seed=args.seed,
                                   cell_N=args.N)
    fieldc = harness.homogenized_field(problem, cfg)
    if callable(fieldc.A0):
        a = lambda x: 0.5 * fieldc.A0(np.asarray(x).reshape(-1, 1))[:, 0, 0]  # noqa: E731
        c = lambda x: fieldc.C0(np.asarray(x).reshape(-1, 1))[:, 0]  # noqa: E731
    else:
        a, c = 0.5 * float(fieldc.A0[0, 0]), float(fieldc.C0[0])
    grid = pde.FdGrid(*problem.domain.bounds()[0], args.M, args.dtau, args.t)
    f, g, l, h = pde.problem_callables(problem)
    sol = pde.solve_obstacle_pde_1d(a, c, tuple(fieldc.summary["gamma_pair"]), f, g, l, h, grid)
    payload = {**sol.summary(), "homogenized": fieldc.summary}
    if args.x0:
        payload["value"] = sol.value_at(_floats(args.x0)[0])
    _emit(payload, args, "oracle.json")
    _write_csv(args, "oracle.csv", ["x", "u", "h", "active"],
               [[repr(x), repr(u), repr(hh), act] for x, u, hh, act in sol.rows()])
    return EXIT_OK


def cmd_sweep(args):
    cfg = harness.ExperimentConfig.load(args.config)
    overrides = {"seed": args.seed, "threads": args.threads, "n_paths": args.paths}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    report = harness.run_sweep(cfg, log=log)
    formats = [args.format] if args.format else cfg.formats
    out = args.out or cfg.out or "."
    for path in harness.emit_report(report, out, formats):
        print(path)
    return EXIT_OK


def cmd_report(args):
    report = harness.load_report(args.input)
    fmt = args.format or "csv"
    if args.out:
        for path in harness.emit_report(report, args.out, [fmt]):
            print(path)
    else:
        sys.stdout.write(harness.FORMATTERS[fmt][1](report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default 0, or the configuration's seed for sweep)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--format", choices=["csv", "json", "plotdata"], default=None)

    parser = argparse.ArgumentParser(prog="rhomog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="randomized assumption checks")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("cell", parents=[common], help="cell problem at a frozen slow point")
    p.add_argument("--config", required=True)
    p.add_argument("--x", default=None, help="comma-separated slow point")
    p.add_argument("--N", type=int, default=512)
    p.set_defaults(func=cmd_cell)

    def path_args(p):
        p.add_argument("--config", required=True)
        p.add_argument("--eps", type=float, default=None,
                       help="scale of the oscillations; omit for the homogenized process")
        p.add_argument("--t", type=float, default=0.25)
        p.add_argument("--x0", default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--paths", type=int, default=10_000)
        p.add_argument("--record-every", type=int, default=1)
        p.add_argument("--N", type=int, default=512)

    p = sub.add_parser("sde", parents=[common], help="simulate reflected paths")
    path_args(p)
    p.set_defaults(func=cmd_sde)

    p = sub.add_parser("solve", parents=[common], help="backward solve on simulated paths")
    path_args(p)
    p.add_argument("--scheme", choices=["penalized", "reflected"], default="reflected")
    p.add_argument("--n", type=float, default=64.0)
    p.add_argument("--explicit", action="store_true", help="explicit penalty update")
    p.add_argument("--deg", type=int, default=2)
    p.add_argument("--psi", action="store_true", help="add psi(x) to the regression basis")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", parents=[common], help="finite-difference homogenized value")
    p.add_argument("--config", required=True)
    p.add_argument("--t", type=float, default=0.25)
    p.add_argument("--x0", default=None)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--dtau", type=float, default=1e-4)
    p.add_argument("--N", type=int, default=512)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", parents=[common], help="convert a JSON report")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and args.command != "sweep":
        args.seed = 0
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, RhomogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

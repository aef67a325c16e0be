"""Command-line front end: ``rlq validate | solve | verify | chain``.

Exit codes: 0 success, 1 validation failure, 2 parse failure, 3 solver
failure, 4 verification failure.
"""
import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__, reports
from .adjoint import solve_adjoint_ode
from .chain import occupation_probabilities, sample_regime_path
from .config import load_spec
from .control import build_policy, optimal_value, original_control_policy
from .errors import DimensionError, ParseError, RLQError, SchemaError, SingularR
from .grid import TimeGrid
from .lsmc import (LSMCPolicy, RegressionBasis, dump_tables, optimal_value_mc, simulate_brownian_grid,
                   solve_adjoint_lsmc, solve_sre_lsmc)
from .problem import reduce_cross_term, validate_spec
from .riccati import check_condition_lsigma, scaled_solution, solve_riccati_ode, solve_riccati_picard
from .simulate import constant_deviation_penalty, estimate_cost, perturbed
from .streams import as_generator

EXIT_OK, EXIT_VALIDATION, EXIT_PARSE, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3, 4
# validation codes the solver itself reports more precisely (as SingularInnerMatrix)
DEFERRED_CODES = ("r_floor",)
# absolute slack for statistics that are exactly zero up to rounding
ROUNDOFF = 1e-9
# safety factor on the step-doubling bias estimate, which is only asymptotically exact
ALLOWANCE_FACTOR = 2.0

log = logging.getLogger("rlq")


class CliFailure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _error_text(exc):
    name = type(exc).__name__
    msg = str(exc)
    return msg if msg.startswith(name) else f"{name}: {msg}"


def _load(path):
    try:
        return load_spec(path)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise CliFailure(EXIT_PARSE, f"cannot read config: {exc}") from None
    except (ParseError, SchemaError) as exc:
        raise CliFailure(EXIT_PARSE, _error_text(exc)) from None
    except DimensionError as exc:
        raise CliFailure(EXIT_VALIDATION, _error_text(exc)) from None


def _validated(spec, grid, defer=()):
    report = validate_spec(spec, grid)
    fatal = [e for e in report if e.code not in defer]
    for e in report:
        print(("error: " if e in fatal else "warning: ") + str(e), file=sys.stderr)
    if fatal:
        raise CliFailure(EXIT_VALIDATION, f"{len(fatal)} validation error(s)")
    return report


class Timer:
    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t0

        return _Phase()


# ---------------------------------------------------------------------------
# pipelines

def solve_deterministic(spec, grid, mode="ode", corrupt=None, timer=None):
    """Riccati, adjoint, policy (in original controls) and value for a deterministic spec."""
    timer = timer or Timer()
    reduced = reduce_cross_term(spec, grid)
    with timer("riccati"):
        ric = solve_riccati_picard(reduced, grid) if mode == "picard" else solve_riccati_ode(reduced, grid)
    if corrupt is not None:
        ric = scaled_solution(reduced, ric, corrupt)
    with timer("adjoint"):
        adj = solve_adjoint_ode(reduced, ric, grid)
    with timer("policy"):
        policy = build_policy(ric, adj, reduced)
        occ = occupation_probabilities(reduced.generator, reduced.i0, grid)
        value = optimal_value(reduced, ric, adj, occ)
    return ric, adj, original_control_policy(policy, reduced), value


def _mean_field_tables(sol):
    return sol.values.mean(axis=1), sol.martingale.mean(axis=1)


def cmd_validate(args):
    spec = _load(args.config)
    grid = TimeGrid(spec.T, args.grid) if spec.T > 0 else None
    report = validate_spec(spec, grid)
    for e in report:
        print(str(e))
    if not report.ok:
        return EXIT_VALIDATION
    print(f"ok: n={spec.n} m={spec.m} regimes={spec.ell} T={spec.T:g} mode={spec.randomness_mode}")
    return EXIT_OK


def cmd_solve(args):
    timer = Timer()
    with timer("load"):
        spec = _load(args.config)
        grid = TimeGrid(spec.T, args.grid)
        _validated(spec, grid, DEFERRED_CODES)
    if spec.randomness_mode != "deterministic" and args.mode != "lsmc":
        raise CliFailure(EXIT_VALIDATION, f"mode {args.mode!r} needs deterministic coefficients; use --mode lsmc")
    os.makedirs(args.out, exist_ok=True)
    try:
        condition = check_condition_lsigma(spec, grid)
    except SingularR:
        condition = float("inf")
    print(f"condition value sup|D R^-1 D^T| = {condition:.6g}")
    if condition > 1.0:
        print("warning: condition value exceeds 1.0; uniqueness is not guaranteed by the smallness condition")
    files = {}
    if args.mode == "lsmc":
        files.update(_solve_lsmc(spec, grid, args, timer))
    else:
        ric, adj, policy, value = solve_deterministic(spec, grid, args.mode, timer=timer)
        with timer("write"):
            files["riccati"] = os.path.join(args.out, "riccati.csv")
            files["adjoint"] = os.path.join(args.out, "adjoint.csv")
            files["policy"] = os.path.join(args.out, "policy.csv")
            files["value"] = os.path.join(args.out, "value.csv")
            reports.write_riccati(files["riccati"], ric)
            reports.write_adjoint(files["adjoint"], adj)
            reports.write_policy(files["policy"], policy)
            reports.write_value(files["value"], value)
        print(f"V = {value.V:.17g}")
        if args.reference_grid:
            files["reference"] = _reference(spec, grid, ric, adj, value, args, timer)
    _manifest(args, spec, grid, timer, files, condition=condition)
    return EXIT_OK


def _reference(spec, grid, ric, adj, value, args, timer):
    ref_grid = TimeGrid(spec.T, args.reference_grid)
    if not ref_grid.refines(grid):
        raise CliFailure(EXIT_VALIDATION, f"--reference-grid {args.reference_grid} must be a multiple of {grid.N}")
    with timer("reference"):
        r2, a2, _, v2 = solve_deterministic(spec, ref_grid, args.mode)
    step = ref_grid.N // grid.N
    rows = []
    for name, coarse, fine in (("P", ric.P, r2.P[::step]), ("K", adj.K, a2.K[::step])):
        diff = np.abs(coarse - fine).max()
        rows.append((f"sup_abs_diff_{name}", float(diff)))
    rows.append(("V_coarse", value.V))
    rows.append(("V_reference", v2.V))
    rows.append(("V_abs_diff", abs(value.V - v2.V)))
    path = os.path.join(args.out, "reference.csv")
    reports.write_rows(path, ["quantity", "value"], rows)
    return path


def _solve_lsmc(spec, grid, args, timer):
    out = {}
    reduced = reduce_cross_term(spec, grid)
    basis = RegressionBasis(args.degree)
    with timer("brownian"):
        bg = simulate_brownian_grid(grid, args.paths, args.seed)
    with timer("riccati"):
        sre = solve_sre_lsmc(reduced, bg, basis)
    with timer("adjoint"):
        adj = solve_adjoint_lsmc(reduced, sre, bg, basis)
    with timer("policy"):
        pol = LSMCPolicy(reduced, sre, adj)
        gains, offsets = [], []
        for k in range(grid.N + 1):
            g, p = pol.gain_offset(k, bg.values[:, k])
            gains.append(g.mean(axis=0))
            offsets.append(p.mean(axis=0))
        value = optimal_value_mc(reduced, sre, adj, bg, rng=args.seed)
    P, Lam = _mean_field_tables(sre)
    K, L = _mean_field_tables(adj)
    with timer("write"):
        out["riccati"] = os.path.join(args.out, "riccati.csv")
        out["adjoint"] = os.path.join(args.out, "adjoint.csv")
        out["policy"] = os.path.join(args.out, "policy.csv")
        out["value"] = os.path.join(args.out, "value.csv")
        out["riccati_tables"] = os.path.join(args.out, "riccati_tables.rlq")
        out["adjoint_tables"] = os.path.join(args.out, "adjoint_tables.rlq")
        reports.write_node_tables(out["riccati"], grid.nodes, [("P", P), ("Lambda", Lam)])
        reports.write_node_tables(out["adjoint"], grid.nodes, [("K", K), ("L", L)])
        reports.write_node_tables(out["policy"], grid.nodes, [("Gamma", np.array(gains)), ("phi", np.array(offsets))])
        reports.write_value(out["value"], value)
        dump_tables(sre, out["riccati_tables"])
        dump_tables(adj, out["adjoint_tables"])
    print(f"V = {value.V:.17g} (stderr {value.terms['stderr']:.3g}); LSMC passes: {sre.iterations}; "
          f"PSD clipping on {100 * sre.diagnostics['clip_fraction']:.3g}% of samples")
    return out


def verification_checks(spec, grid, M, seed, corrupt=None):
    """Statistical checks of optimality and the completion-of-squares identity.

    Each statistic gets a discretization allowance ``2 |s(N) - s(N/2)|`` from a
    half-resolution rerun with the same seed, on top of 3 standard errors.
    """
    def stats(g):
        ric, adj, policy, value = solve_deterministic(spec, g, corrupt=corrupt)
        delta = np.full(spec.m, 0.5)
        controls = {
            "optimal": policy,
            "offset_plus": perturbed(policy, delta),
            "offset_minus": perturbed(policy, -delta),
            "gain_scaled": perturbed(policy, gain_delta=0.2 * policy.Gamma),
        }
        batches = {name: estimate_cost(spec, c, g, M, seed, reference=policy) for name, c in controls.items()}
        opt = batches["optimal"]
        out = {"value": (opt.mean - value.V, opt.stderr)}
        for name, b in batches.items():
            if name == "optimal":
                continue
            pooled = float(np.hypot(b.stderr, b.penalty_stderr))
            out[f"decomposition_{name}"] = (b.mean - value.V - b.penalty_mean, pooled)
            out[f"optimality_{name}"] = (b.mean - opt.mean, float(np.hypot(b.stderr, opt.stderr)))
        for name, sign in (("offset_plus", 1.0), ("offset_minus", -1.0)):
            b = batches[name]
            quad = constant_deviation_penalty(policy, spec, sign * delta)
            out[f"penalty_{name}"] = (b.penalty_mean - quad, b.penalty_stderr)
        return out

    fine = stats(grid)
    coarse = stats(TimeGrid(grid.T, max(grid.N // 2, 1))) if grid.N >= 2 else {k: v for k, v in fine.items()}
    rows = []
    for name, (s, se) in fine.items():
        allowance = ALLOWANCE_FACTOR * abs(s - coarse[name][0])
        threshold = 3.0 * se + allowance + ROUNDOFF
        if name.startswith("optimality_"):
            ok = s >= -threshold
        else:
            ok = abs(s) <= threshold
        rows.append((name, s, se, allowance, threshold, ok))
    return rows


def cmd_verify(args):
    timer = Timer()
    spec = _load(args.config)
    grid = TimeGrid(spec.T, args.grid)
    _validated(spec, grid)
    if spec.randomness_mode != "deterministic":
        raise CliFailure(EXIT_VALIDATION, "verify supports deterministic coefficients only")
    os.makedirs(args.out, exist_ok=True)
    with timer("checks"):
        rows = verification_checks(spec, grid, args.paths, args.seed, corrupt=args.corrupt_p)
    path = os.path.join(args.out, "verify.csv")
    reports.write_rows(path, ["check", "statistic", "stderr", "allowance", "threshold", "pass"], rows)
    failed = [r[0] for r in rows if not r[-1]]
    for r in rows:
        print(f"{'PASS' if r[-1] else 'FAIL'} {r[0]}: {r[1]:.6g} (stderr {r[2]:.3g}, threshold {r[4]:.3g})")
    _manifest(args, spec, grid, timer, {"verify": path})
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_chain(args):
    spec = _load(args.config)
    _validated(spec, None)
    rng = as_generator(args.seed)
    paths = [sample_regime_path(spec.generator, spec.i0, spec.T, rng) for _ in range(args.paths)]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "chain_paths.csv")
    reports.write_chain_paths(path, paths)
    timer = Timer()
    _manifest(args, spec, None, timer, {"chain_paths": path})
    return EXIT_OK


def _manifest(args, spec, grid, timer, files, **extra):
    entries = {
        "command": args.command,
        "config": os.path.abspath(args.config),
        "tool_version": __version__,
        "T": spec.T,
    }
    if grid is not None:
        entries["grid_N"] = grid.N
    for key in ("mode", "paths", "seed", "reference_grid"):
        if getattr(args, key, None) is not None:
            entries[key] = getattr(args, key)
    entries["output_dir"] = os.path.abspath(args.out)
    entries.update(extra)
    for name, path in files.items():
        entries[f"file_{name}"] = os.path.basename(path)
    entries["timings_seconds"] = {k: f"{v:.6f}" for k, v in timer.phases.items()}
    reports.write_manifest(os.path.join(args.out, "manifest.txt"), entries)


def build_parser():
    parser = argparse.ArgumentParser(prog="rlq", description="Regime-switching stochastic LQ solver")
    parser.add_argument("--version", action="version", version=f"rlq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.add_argument("--grid", type=int, default=100, help="nodes used to probe time-dependent coefficients")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="solve Riccati and adjoint equations; write CSV reports")
    p.add_argument("config")
    p.add_argument("--grid", type=int, default=200, help="number of time steps N")
    p.add_argument("--mode", choices=("ode", "picard", "lsmc"), default="ode")
    p.add_argument("--out", default="out")
    p.add_argument("--paths", type=int, default=10000, help="LSMC paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--degree", type=int, default=3, help="LSMC polynomial degree")
    p.add_argument("--reference-grid", type=int, default=None,
                   help="also solve on this finer grid and report the differences")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="Monte Carlo optimality and decomposition checks")
    p.add_argument("config")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--paths", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--corrupt-p", type=float, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("chain", help="sample regime paths to CSV")
    p.add_argument("config")
    p.add_argument("--paths", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_chain)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except RLQError as exc:
        print(f"error: {_error_text(exc)}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

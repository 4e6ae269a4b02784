"""Command-line interface.

``bridgekit <command> [--config FILE] [--epsilon V] [--seed N] [--out DIR]``

Commands
--------
bridge-gaussian
    Solve the closed-form bridge of a scenario; write ``bridge.json``,
    ``bridge_flow.csv`` and ``summary.txt``.
bridge-grid
    Solve the Schrodinger system on the scenario's spatial grid; write
    potentials, marginal slices and drift slices.
simulate
    Simulate a stored bridge (``--bridge``); write sample paths and per-node
    empirical moments.
reproduce
    Regenerate the reference data sets (``--example mean-shift|smoluchowski``).
residuals
    Report Riccati, continuity and Hamilton-Jacobi residuals plus actions.

Exit status: 0 success, 1 invalid input, 2 solver failure, 3 I/O failure.
Printed numbers carry 9 significant digits.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fluid_dynamics as fd
from . import reproduce as rp
from . import schrodinger_grid as sg
from .exceptions import BridgeError, NonConvergenceError, SolverError, ValidationError
from .gauss_markov import TimeGrid, bridge_solve, riccati_residual
from .sde_sim import ELLIPSE_COLUMNS, bridge_drift, moment_bands, simulate, tube_ellipses
from .serialization import (
    Scenario,
    atomic_write,
    bridge_from_json,
    bridge_to_json,
    fmt,
    write_csv,
)

__all__ = ["main", "EXIT_OK", "EXIT_VALIDATION", "EXIT_SOLVER", "EXIT_IO"]

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3
HJ_SAMPLES = 100
REPRODUCE_PATHS = 10
# continuity check: nodes per axis of the +-6 sd window, and the time offset
# of the central difference relative to the time span
CONTINUITY_POINTS = {1: 4001, 2: 1201}
CONTINUITY_TIME_STEP = 1e-4
logger = logging.getLogger("bridgekit")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class Report:
    """Ordered ``key: value`` lines, printed and saved as ``summary.txt``."""

    def __init__(self):
        self.lines = []

    def add(self, key, value):
        if isinstance(value, (list, tuple, np.ndarray)):
            text = " ".join(fmt(v) for v in np.ravel(value))
        elif isinstance(value, (float, np.floating)):
            text = fmt(value)
        else:
            text = str(value)
        self.lines.append(f"{key}: {text}")

    def text(self):
        return "\n".join(self.lines) + "\n"


def _load_scenario(args, required=True):
    if args.config is None:
        if required:
            raise ValidationError("--config is required for this command")
        return None
    scenario = Scenario.load(args.config)
    if args.epsilon is not None:
        scenario = scenario.with_epsilon(args.epsilon)
    if args.seed is not None:
        scenario.simulation = {**scenario.simulation, "seed": args.seed}
    return scenario


def _out_dir(args, scenario):
    if args.out is not None:
        return Path(args.out)
    if scenario is not None:
        return Path(scenario.output["directory"])
    return Path(".")


def _flow_rows(bridge):
    for k, t in enumerate(bridge.times):
        yield [t, *bridge.mean[k], *bridge.covariance[k].ravel(), *bridge.pi[k].ravel(), *bridge.mean_drift[k]]


def _flow_header(n):
    idx = [f"{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    return (
        ["t"]
        + [f"n{i + 1}" for i in range(n)]
        + [f"sigma{s}" for s in idx]
        + [f"pi{s}" for s in idx]
        + [f"m{i + 1}" for i in range(n)]
    )


def _hj_certificate(bridge, seed):
    """HJ residual and gradient check of an ``eps = 0`` bridge at random points."""
    psi = fd.QuadraticPotential.from_bridge(bridge)
    sd = np.sqrt(np.einsum("kii->ki", bridge.covariance))
    lo = np.min(bridge.mean - 3 * sd, axis=0)
    hi = np.max(bridge.mean + 3 * sd, axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(HJ_SAMPLES, bridge.dimension))
    ts = rng.uniform(bridge.grid.t_start, bridge.grid.t_end, size=HJ_SAMPLES)
    prior_v = lambda x, t: bridge.prior.drift_at(t) @ x
    res = fd.hj_residual(psi, prior_v, pts, ts)
    grad_err = max(
        float(np.max(np.abs(psi.gradient(x, t) - (bridge.forward_velocity(x, t) - prior_v(x, t)))))
        for x, t in zip(pts, ts)
    )
    return res.max_abs, grad_err


def cmd_bridge_gaussian(args):
    scenario = _load_scenario(args)
    out = _out_dir(args, scenario)
    bridge = bridge_solve(scenario.prior, scenario.initial, scenario.final, scenario.time)
    mean_err, cov_err = bridge.endpoint_errors()
    report = Report()
    report.add("epsilon", bridge.epsilon)
    report.add("mean_endpoint_error", mean_err)
    report.add("covariance_endpoint_error", cov_err)
    report.add("pi_initial", bridge.pi[0])
    for key, value in fd.gaussian_actions(bridge).items():
        report.add(key, value)
    if bridge.epsilon == 0:
        hj, grad = _hj_certificate(bridge, scenario.simulation["seed"])
        report.add("hj_residual_max", hj)
        report.add("hj_gradient_error_max", grad)
    formats = scenario.output["formats"]
    if "json" in formats:
        atomic_write(out / "bridge.json", bridge_to_json(bridge))
    if "csv" in formats:
        write_csv(out / "bridge_flow.csv", _flow_header(bridge.dimension), _flow_rows(bridge))
    atomic_write(out / "summary.txt", report.text())
    sys.stdout.write(report.text())
    return EXIT_OK


def cmd_bridge_grid(args):
    scenario = _load_scenario(args)
    if scenario.space is None:
        raise ValidationError("scenario has no 'space' block; the grid solver needs a spatial grid")
    if not scenario.prior.epsilon > 0:
        raise ValidationError("the grid solver requires epsilon > 0")
    out = _out_dir(args, scenario)
    grid, prior, opts = scenario.space, scenario.prior, scenario.grid_options
    rho0 = sg.GridDensity.from_gaussian(grid, scenario.initial.mean, scenario.initial.covariance)
    rho1 = sg.GridDensity.from_gaussian(grid, scenario.final.mean, scenario.final.covariance)
    t0, t1 = scenario.time.t_start, scenario.time.t_end
    kern = sg.kernel(prior, grid, t0, t1)
    pair = sg.fortet_solve(kern, rho0, rho1, tol=opts["tol"], max_iter=opts["max_iter"])
    reference = bridge_solve(prior, scenario.initial, scenario.final, scenario.time)

    d = grid.dimension
    xs = grid.flat_coordinates
    xcols = [f"x{i + 1}" for i in range(d)]
    write_csv(
        out / "potentials.csv",
        xcols + ["log_phi_end", "log_phi_hat_start"],
        np.column_stack([xs, pair.log_phi_end.ravel(), pair.log_phi_hat_start.ravel()]),
    )
    slices = TimeGrid(t0, t1, opts["slices"] - 1).nodes
    marg_rows, drift_rows, worst_l1 = [], [], 0.0
    for t in slices:
        rho = sg.marginal_at(pair, prior, grid, t)
        _, _, _, n_t, s_t = reference._state_at(t)
        exact = sg.GridDensity.from_gaussian(grid, n_t, s_t, check_domain=False)
        worst_l1 = max(worst_l1, rho.l1_distance(exact))
        fwd = sg.forward_drift(pair, prior, grid, t)
        cur, osm = sg.symmetric_drifts(pair, prior, grid, t)
        tcol = np.full(grid.size, t)
        marg_rows.append(np.column_stack([tcol, xs, rho.values.ravel()]))
        drift_rows.append(
            np.column_stack([tcol, xs] + [f.values.reshape(-1, d) for f in (fwd, cur, osm)])
        )
    write_csv(out / "marginals.csv", ["t"] + xcols + ["density"], np.vstack(marg_rows))
    dcols = [f"{kind}{i + 1}" for kind in ("forward", "current", "osmotic") for i in range(d)]
    write_csv(out / "drifts.csv", ["t"] + xcols + dcols, np.vstack(drift_rows))

    report = Report()
    report.add("epsilon", prior.epsilon)
    report.add("iterations", pair.iterations)
    report.add("l1_gap_start", pair.gap_start)
    report.add("l1_gap_end", pair.gap_end)
    report.add("max_l1_vs_closed_form", worst_l1)
    atomic_write(out / "summary.txt", report.text())
    sys.stdout.write(report.text())
    return EXIT_OK


def cmd_simulate(args):
    scenario = _load_scenario(args, required=False)
    if args.bridge is None:
        raise ValidationError("--bridge is required for simulate")
    bridge = bridge_from_json(Path(args.bridge).read_text(encoding="utf-8"))
    sim = scenario.simulation if scenario is not None else Scenario.__dataclass_fields__["simulation"].default_factory()
    if scenario is None and args.seed is not None:
        sim = {**sim, "seed": args.seed}
    out = _out_dir(args, scenario)
    grid = bridge.grid
    if sim["dt"] is not None:
        steps = int(round(grid.span / sim["dt"]))
        if steps < 1 or abs(steps * sim["dt"] - grid.span) > 1e-9 * grid.span:
            raise ValidationError(f"simulation.dt={sim['dt']} does not divide the time span {grid.span}")
        grid = TimeGrid(grid.t_start, grid.t_end, steps)
    ens = simulate(bridge_drift(bridge), bridge.epsilon, bridge.initial, grid, sim["paths"], sim["seed"])

    n = bridge.dimension
    xcols = [f"x{i + 1}" for i in range(n)]
    shown = min(sim["export_paths"], ens.n_paths)
    rows = (
        [p, k, t, *ens.paths[p, k]]
        for p in range(shown)
        for k, t in enumerate(grid.nodes)
    )
    write_csv(out / "paths.csv", ["path_id", "step", "t"] + xcols, rows)

    idx = [f"{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    header = (
        ["t"] + [f"mean{i + 1}" for i in range(n)] + [f"ref_mean{i + 1}" for i in range(n)]
        + [f"cov{s}" for s in idx] + [f"ref_cov{s}" for s in idx] + ["within_band"]
    )
    rows, violations = [], 0
    if ens.n_paths >= 2:
        mean = ens.paths.mean(axis=0)
        dev = ens.paths - mean
        cov = np.einsum("pki,pkj->kij", dev, dev) / (ens.n_paths - 1)
        for k, t in enumerate(grid.nodes):
            _, _, _, n_t, s_t = bridge._state_at(t)
            mb, cb = moment_bands(s_t, ens.n_paths)
            ok = np.all(np.abs(mean[k] - n_t) <= mb) and np.all(np.abs(cov[k] - s_t) <= cb + 1e-12)
            violations += not ok
            rows.append([t, *mean[k], *n_t, *cov[k].ravel(), *s_t.ravel(), int(ok)])
        write_csv(out / "moments.csv", header, rows)

    report = Report()
    report.add("paths", ens.n_paths)
    report.add("seed", ens.seed)
    report.add("epsilon", ens.epsilon)
    report.add("dt", grid.dt)
    if rows:
        report.add("final_mean", rows[-1][1 : 1 + n])
        report.add("final_covariance", rows[-1][1 + 2 * n : 1 + 2 * n + n * n])
        report.add("nodes_outside_band", violations)
        if violations:
            logger.warning(
                "%d of %d nodes fall outside the 3-sigma Monte Carlo bands (statistical, not an error)",
                violations, len(rows),
            )
    atomic_write(out / "summary.txt", report.text())
    sys.stdout.write(report.text())
    return EXIT_OK


def _eps_label(eps):
    return f"{eps:g}"


def _reproduce_smoluchowski(args, out):
    eps_list = args.epsilons if args.epsilons is not None else list(rp.SMOLUCHOWSKI_EPSILONS)
    seed = args.seed if args.seed is not None else 0
    report = Report()
    summary = []
    cases = [(f"eps{_eps_label(e)}", rp.smoluchowski_problem(e)) for e in eps_list]
    cases.append(("no_prior", rp.translation_problem(0.0)))
    for label, problem in cases:
        bridge = rp.solve(problem)
        write_csv(out / f"tube_{label}.csv", ELLIPSE_COLUMNS, tube_ellipses(bridge))
        ens = simulate(bridge_drift(bridge), bridge.epsilon, bridge.initial, bridge.grid, REPRODUCE_PATHS, seed)
        rows = ([p, k, t, *ens.paths[p, k]] for p in range(ens.n_paths) for k, t in enumerate(bridge.times))
        write_csv(out / f"paths_{label}.csv", ["path_id", "step", "t", "x1", "x2"], rows)
        mean_err, cov_err = bridge.endpoint_errors()
        actions = fd.gaussian_actions(bridge)
        summary.append([bridge.epsilon, *bridge.pi[0].ravel(), mean_err, cov_err,
                        actions["bb_action"], actions["prior_action"], actions["sb_action"]])
        report.add(f"{label}.mean_endpoint_error", mean_err)
        report.add(f"{label}.covariance_endpoint_error", cov_err)
        report.add(f"{label}.start_center", bridge.mean[0])
        report.add(f"{label}.end_center", bridge.mean[-1])
        report.add(f"{label}.prior_action", actions["prior_action"])
    write_csv(
        out / "smoluchowski_summary.csv",
        ["epsilon", "pi11", "pi12", "pi21", "pi22", "mean_error", "covariance_error",
         "bb_action", "prior_action", "sb_action"],
        summary,
    )
    return report


def _reproduce_mean_shift(args, out):
    sigma2 = args.epsilons if args.epsilons is not None else list(rp.MEAN_SHIFT_SIGMA2)
    report = Report()
    xs = np.linspace(-2.0, 2.0, 201)[:, None]
    ts = np.linspace(0.0, 1.0, 101)[None, :]
    rows = []
    for s2 in sigma2:
        if not s2 > 0:
            raise ValidationError("mean-shift needs positive sigma^2 values")
        c = rp.mean_shift_constant(s2)
        q_dev = float(np.max(np.abs(rp.mean_shift_variance(ts, s2) - 1.0)))
        v_dev = float(np.max(np.abs(rp.mean_shift_current_velocity(xs, ts, s2) - 1.0)))
        t, m = rp.mean_shift_mean(s2)
        m_dev = float(np.max(np.abs(m - t)))
        rows.append([s2, c, q_dev, v_dev, m_dev])
        label = f"sigma2={_eps_label(s2)}"
        report.add(f"{label}.c", c)
        report.add(f"{label}.max_abs_q_minus_1", q_dev)
        report.add(f"{label}.max_abs_v_minus_1", v_dev)
        report.add(f"{label}.max_abs_mean_minus_t", m_dev)
    write_csv(out / "mean_shift_summary.csv", ["sigma2", "c", "max_abs_q_minus_1", "max_abs_v_minus_1",
                                                "max_abs_mean_minus_t"], rows)
    write_csv(out / "mean_shift_drifts.csv", ["sigma2", "t", "x", "forward", "current", "osmotic"],
              rp.mean_shift_table(sigma2))
    return report


def cmd_reproduce(args):
    out = _out_dir(args, None)
    if args.example == "smoluchowski":
        report = _reproduce_smoluchowski(args, out)
    elif args.example == "mean-shift":
        report = _reproduce_mean_shift(args, out)
    else:
        raise ValidationError("--example must be 'mean-shift' or 'smoluchowski'")
    atomic_write(out / "summary.txt", report.text())
    sys.stdout.write(report.text())
    return EXIT_OK


def _window(bridge, t, points):
    _, _, _, n_t, s_t = bridge._state_at(t)
    half = 6.0 * np.sqrt(np.diag(s_t))
    return sg.SpatialGrid(tuple(n_t - half), tuple(n_t + half), (points,) * bridge.dimension)


def cmd_residuals(args):
    scenario = _load_scenario(args)
    out = _out_dir(args, scenario)
    bridge = bridge_solve(scenario.prior, scenario.initial, scenario.final, scenario.time)
    report = Report()
    report.add("epsilon", bridge.epsilon)
    report.add("riccati_residual_max", float(np.max(np.abs(riccati_residual(bridge.pi, bridge.prior, bridge.grid)))))

    t_mid = 0.5 * (bridge.grid.t_start + bridge.grid.t_end)
    delta = CONTINUITY_TIME_STEP * bridge.grid.span
    grid = _window(bridge, t_mid, CONTINUITY_POINTS[bridge.dimension])
    flow = fd.flow_from_bridge(bridge, grid, TimeGrid(t_mid - delta, t_mid + delta, 2))
    res = fd.continuity_residual(flow)
    report.add("continuity_residual_max", res.max_abs)
    report.add("continuity_grid_spacing", grid.spacing)

    zero = bridge if bridge.epsilon == 0 else bridge_solve(
        scenario.prior.with_epsilon(0.0), scenario.initial, scenario.final, scenario.time
    )
    hj, grad = _hj_certificate(zero, scenario.simulation["seed"])
    report.add("hj_residual_max", hj)
    report.add("hj_gradient_error_max", grad)
    for key, value in fd.gaussian_actions(bridge).items():
        report.add(key, value)
    atomic_write(out / "residuals.txt", report.text())
    sys.stdout.write(report.text())
    return EXIT_OK


def _epsilon_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def build_parser():
    parser = _Parser(prog="bridgekit", description="Schrodinger bridges and optimal transport with a prior.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario YAML file")
        p.add_argument("--epsilon", type=float, help="override the prior diffusion")
        p.add_argument("--seed", type=int, help="override the simulation seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
        return p

    common(sub.add_parser("bridge-gaussian", help="closed-form Gaussian bridge")).set_defaults(func=cmd_bridge_gaussian)
    common(sub.add_parser("bridge-grid", help="grid Schrodinger system")).set_defaults(func=cmd_bridge_grid)
    p = common(sub.add_parser("simulate", help="Monte Carlo paths of a stored bridge"))
    p.add_argument("--bridge", help="bridge JSON written by bridge-gaussian")
    p.set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("reproduce", help="reference data sets"))
    p.add_argument("--example", required=True, choices=["mean-shift", "smoluchowski"])
    p.add_argument("--epsilons", type=_epsilon_list, help="comma-separated diffusion values (sigma^2 for mean-shift)")
    p.set_defaults(func=cmd_reproduce)
    common(sub.add_parser("residuals", help="PDE residuals and actions")).set_defaults(func=cmd_residuals)
    return parser


def main(argv=None):
    """Entry point; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"bridgekit: error: {exc}\n")
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        sys.stderr.write(f"bridgekit: solver did not converge: {exc} (last gap {exc.last_gap})\n")
        return EXIT_SOLVER
    except SolverError as exc:
        sys.stderr.write(f"bridgekit: solver failure: {exc}\n")
        return EXIT_SOLVER
    except (ValidationError, ValueError) as exc:
        sys.stderr.write(f"bridgekit: invalid input: {exc}\n")
        return EXIT_VALIDATION
    except OSError as exc:
        sys.stderr.write(f"bridgekit: I/O failure: {exc}\n")
        return EXIT_IO
    except BridgeError as exc:
        sys.stderr.write(f"bridgekit: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

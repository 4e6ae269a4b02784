"""Acceptance suite: one test and one verdict line per criterion.

Each test prints ``criterion N PASS|FAIL: <title> | <checks> | <time>``;
the lines are repeated in a summary section at the end of the run. Every
timing covers the whole test body, solves included.
"""

import logging
import time
from contextlib import contextmanager

import numpy as np
import pytest

from bridgekit import fluid_dynamics as fd
from bridgekit import schrodinger_grid as sg
from bridgekit.gauss_markov import (
    GaussianMarginal,
    LinearPrior,
    TimeGrid,
    bridge_solve,
    covariance_explicit_path,
    gramian,
    pi_initial,
    pi_zero_explicit,
    transition,
)
from bridgekit.reproduce import (
    SMOLUCHOWSKI_EPSILONS,
    mean_shift_constant,
    mean_shift_current_velocity,
    mean_shift_forward_drift,
    mean_shift_mean,
    smoluchowski_problem,
    solve,
    translation_problem,
)
from bridgekit.sde_sim import bridge_drift, empirical_moments, moment_bands, simulate

UNIT = TimeGrid(0.0, 1.0, 1000)


class Verdict:
    def __init__(self):
        self.checks = []

    def le(self, label, value, bound):
        """Record ``value <= bound``."""
        self.checks.append((f"{label} {value:.3g} <= {bound:g}", bool(value <= bound)))

    def true(self, label, ok):
        self.checks.append((label, bool(ok)))


@contextmanager
def criterion(log, number, title, budget):
    verdict = Verdict()
    start = time.perf_counter()
    error = None
    try:
        yield verdict
    except Exception as exc:  # recorded as a failing check, then re-raised
        error = exc
        verdict.true(f"raised {type(exc).__name__}: {exc}", False)
    elapsed = time.perf_counter() - start
    verdict.true(f"time {elapsed:.2f} s < {budget:g} s", elapsed < budget)
    passed = all(ok for _, ok in verdict.checks)
    details = "; ".join(f"{label}{'' if ok else ' [violated]'}" for label, ok in verdict.checks)
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {details}"
    log.append(line)
    print(line)
    if error is not None:
        raise error
    assert passed, line


def test_criterion_1_endpoint_steering(acceptance_log):
    with criterion(acceptance_log, 1, "planar steering hits both endpoint marginals", 4 * 5.0) as v:
        for eps in SMOLUCHOWSKI_EPSILONS:
            start = time.perf_counter()
            bridge = bridge_solve(*smoluchowski_problem(eps), UNIT)
            elapsed = time.perf_counter() - start
            mean_err = np.linalg.norm(bridge.mean[-1] - [5.0, 5.0])
            cov_err = np.linalg.norm(bridge.covariance[-1] - np.eye(2))
            v.le(f"eps={eps:g} mean error", mean_err, 1e-6)
            v.le("covariance error", cov_err, 1e-6)
            v.le("solve time [s]", elapsed, 5.0)


def test_criterion_2_zero_noise_limit(acceptance_log):
    with criterion(acceptance_log, 2, "initial gain converges as the noise vanishes", 1.0) as v:
        _, rho0, rho1 = smoluchowski_problem(0.0)
        prior = LinearPrior(-3.0 * np.eye(2))
        phi, gram = transition(prior, 0.0, 1.0), gramian(prior, 0.0, 1.0, UNIT)
        base = pi_initial(rho0.covariance, rho1.covariance, phi, gram, 0.0)
        gaps = [
            np.linalg.norm(pi_initial(rho0.covariance, rho1.covariance, phi, gram, eps) - base)
            for eps in (1.0, 0.1, 0.01, 0.001)
        ]
        v.true("gaps " + ", ".join(f"{g:.3g}" for g in gaps) + " strictly decreasing",
               all(a > b for a, b in zip(gaps, gaps[1:])))
        v.le("gap at eps=0.001", gaps[-1], 1e-2)


def test_criterion_3_mean_shift_closed_form(acceptance_log):
    with criterion(acceptance_log, 3, "mean-shift constant, mean path and drift limit", 1.0) as v:
        v.le("|c(sigma=1) + 2.6180340|", abs(mean_shift_constant(1.0) + 2.6180340), 1e-6)
        t, m = mean_shift_mean(1.0)
        v.le("max |m_t - t|", np.max(np.abs(m - t)), 1e-8)
        xx, tt = np.meshgrid(np.linspace(-2.0, 2.0, 401), np.linspace(0.0, 1.0, 201))
        v.le("sup |v - 1| at sigma^2=1e-4", np.max(np.abs(mean_shift_current_velocity(xx, tt, 1e-4) - 1.0)), 1e-2)


def test_criterion_4_hj_certificate(acceptance_log):
    with criterion(acceptance_log, 4, "Hamilton-Jacobi certificate of zero-noise bridges", 1.0) as v:
        rng = np.random.default_rng(2024)
        for name, problem in (("planar", smoluchowski_problem(0.0)), ("translation", translation_problem(0.0))):
            bridge = solve(problem)
            psi = fd.QuadraticPotential.from_bridge(bridge)
            points, times = rng.uniform(-6.0, 6.0, (100, 2)), rng.uniform(0.0, 1.0, 100)
            field = lambda x, t: bridge.prior.drift_at(t) @ x
            v.le(f"{name} max |HJ residual|", fd.hj_residual(psi, field, points, times).max_abs, 1e-8)
            grad_err = max(
                np.max(np.abs(psi.gradient(x, t) - (bridge.forward_velocity(x, t) - field(x, t))))
                for x, t in zip(points, times)
            )
            v.le(f"{name} max |grad psi - (v - v_prior)|", grad_err, 1e-8)


def test_criterion_5_explicit_formulas(acceptance_log, caplog):
    with criterion(acceptance_log, 5, "explicit covariance matches Lyapunov integration", 1.0) as v:
        zero = LinearPrior(np.zeros((1, 1)))
        bridge = bridge_solve(zero, GaussianMarginal([0.0], [[1.0]]), GaussianMarginal([0.0], [[4.0]]), UNIT)
        explicit = covariance_explicit_path(zero, [[1.0]], [[4.0]], UNIT)
        v.le("max |explicit - Lyapunov|", np.max(np.abs(explicit - bridge.covariance)), 1e-6)
        v.le("max |Sigma - (1+t)^2|", np.max(np.abs(bridge.covariance[:, 0, 0] - (1.0 + UNIT.nodes) ** 2)), 1e-6)
        v.le("max |Pi + 1/(1+t)|", np.max(np.abs(bridge.pi[:, 0, 0] + 1.0 / (1.0 + UNIT.nodes))), 1e-6)
        # the printed feedback-gain formula is logged, not enforced
        with caplog.at_level(logging.WARNING, logger="bridgekit.gauss_markov"):
            pi_zero_explicit(zero, [[1.0]], [[4.0]], 0.5, UNIT, transcription="verbatim")
        logged = "disagrees" in caplog.text
        v.true(f"verbatim gain formula discrepancy {'logged' if logged else 'absent'} (informational)", True)
        derived = pi_zero_explicit(zero, [[1.0]], [[4.0]], 0.5, UNIT, transcription="derived")
        v.le("derived gain formula error at t=0.5", abs(derived[0, 0] + 1.0 / 1.5), 1e-6)


def test_criterion_6_grid_oracle(acceptance_log):
    with criterion(acceptance_log, 6, "grid Schrodinger system against the Gaussian bridge", 60.0) as v:
        prior = LinearPrior(np.zeros((1, 1)), 1.0)
        grid = sg.SpatialGrid((-8.0,), (9.0,), (600,))
        rho0 = sg.GridDensity.from_gaussian(grid, [0.0], [[1.0]])
        rho1 = sg.GridDensity.from_gaussian(grid, [1.0], [[1.0]])
        pair = sg.fortet_solve(sg.kernel(prior, grid, 0.0, 1.0), rho0, rho1, tol=1e-8)
        v.le("start L1 gap", pair.gap_start, 1e-8)
        v.le("end L1 gap", pair.gap_end, 1e-8)
        bridge = bridge_solve(prior, GaussianMarginal([0.0], [[1.0]]), GaussianMarginal([1.0], [[1.0]]), UNIT)
        mid = bridge.marginal(0.5)
        exact = sg.GridDensity.from_gaussian(grid, mid.mean, mid.covariance)
        v.le("L1 at t=0.5", sg.marginal_at(pair, prior, grid, 0.5).l1_distance(exact), 1e-3)
        h = grid.spacing[0]
        x = grid.axes[0]
        nelson, drift = 0.0, 0.0
        for t in TimeGrid(0.0, 1.0, 40).nodes[1:-1]:
            fwd = sg.forward_drift(pair, prior, grid, t)
            bwd = sg.backward_drift(pair, prior, grid, t)
            score = grid.gradient(sg.bridge_log_density(pair, prior, t))
            mask = fwd.mask & bwd.mask
            nelson = max(nelson, np.max(np.abs(bwd.values - (fwd.values - prior.epsilon * score))[mask]))
            inside = mask[:] & (np.abs(x - t) <= 4.0)
            err = np.abs(fwd.values[:, 0] - mean_shift_forward_drift(x, t, 1.0))[inside]
            drift = max(drift, np.max(err))
        v.le("Nelson identity over 39 slices", nelson, 1e-6)
        v.le("forward drift vs closed form (bound h^2)", drift, h * h)


def test_criterion_7_action_identities(acceptance_log):
    with criterion(acceptance_log, 7, "action reductions, translation and scaling values", 10.0) as v:
        bridge = solve(smoluchowski_problem(0.0))
        grid = sg.SpatialGrid((-11.0, -11.0), (11.0, 11.0), (111, 111))
        flow = fd.flow_from_bridge(bridge, grid, TimeGrid(0.0, 1.0, 40))
        bb = fd.bb_action(flow)
        v.true("prior_v=0 gives prior_action == bb_action", fd.prior_action(flow, np.zeros_like(flow.velocity)) == bb)
        v.true("eps=0 gives sb_action == bb_action", fd.sb_action(flow, 0.0) == bb)

        line = sg.SpatialGrid((-8.0,), (9.0,), (600,))
        times = TimeGrid(0.0, 1.0, 40)
        x = line.axes[0]
        dens = np.stack([np.exp(-0.5 * (x - t) ** 2) / np.sqrt(2 * np.pi) for t in times.nodes])
        shift = fd.FlowSample(line, times, dens, np.ones(dens.shape + (1,)))
        v.le("|translation action - 0.5|", abs(fd.bb_action(shift) - 0.5), 1e-4)

        wide = sg.SpatialGrid((-14.0,), (14.0,), (1401,))
        x = wide.axes[0]
        sd = 1.0 + times.nodes[:, None]
        dens = np.exp(-0.5 * (x / sd) ** 2) / (np.sqrt(2 * np.pi) * sd)
        scaling = fd.FlowSample(wide, times, dens, (x / sd)[..., None])
        v.le("|scaling action - 0.5|", abs(fd.bb_action(scaling) - 0.5), 1e-3)


def test_criterion_8_monte_carlo(acceptance_log):
    with criterion(acceptance_log, 8, "Monte Carlo moments at eps=9 and reproducibility", 60.0) as v:
        bridge = bridge_solve(*smoluchowski_problem(9.0), UNIT)
        drift = bridge_drift(bridge)
        first = simulate(drift, 9.0, bridge.initial, UNIT, 10_000, seed=42)
        for t in (0.5, 1.0):
            mean, cov = empirical_moments(first, t)
            k = UNIT.index(t)
            mean_band, cov_band = moment_bands(bridge.covariance[k], first.n_paths)
            v.le(f"t={t:g} mean error / band", np.max(np.abs(mean - bridge.mean[k]) / mean_band), 1.0)
            v.le(f"t={t:g} covariance error / band", np.max(np.abs(cov - bridge.covariance[k]) / cov_band), 1.0)
        second = simulate(drift, 9.0, bridge.initial, UNIT, 10_000, seed=42)
        v.true("second run bitwise identical", first.paths.tobytes() == second.paths.tobytes())


def test_criterion_9_optimality_ordering(acceptance_log):
    with criterion(acceptance_log, 9, "zero-noise bridge beats endpoint-preserving perturbations", 30.0) as v:
        bridge = solve(smoluchowski_problem(0.0))
        grid = sg.SpatialGrid((-11.0, -11.0), (11.0, 11.0), (111, 111))
        times = TimeGrid(0.0, 1.0, 40)
        flow = fd.flow_from_bridge(bridge, grid, times)
        prior_v = fd.prior_velocity_field(bridge.prior, grid, times)
        base = fd.prior_action(flow, prior_v)
        center = lambda t: bridge.marginal(t).mean
        weights = [
            (lambda x, t: np.exp(-np.sum((x - center(t)) ** 2, axis=-1) / 8.0), 1.0),
            (lambda x, t: np.sin(x[..., 0] - center(t)[0]), 0.5),
            (lambda x, t: (x[..., 0] - center(t)[0]) * (x[..., 1] - center(t)[1]), 0.3),
            (lambda x, t: np.cos(0.5 * x[..., 1]), 2.0),
            (lambda x, t: np.exp(-np.sum((x - center(t) - 1.0) ** 2, axis=-1) / 2.0), 0.1),
        ]
        continuity = fd.continuity_residual(flow).field
        for i, (weight, amplitude) in enumerate(weights, 1):
            w = fd.divergence_free_perturbation(flow, weight, amplitude)
            moved = flow.with_velocity(flow.velocity + w)
            drift = np.max(np.abs(fd.continuity_residual(moved).field - continuity))
            gain = fd.prior_action(moved, prior_v) - base
            v.true(f"perturbation {i}: action +{gain:.3g}, continuity change {drift:.1g}", gain > 0 and drift < 1e-8)

"""Reference scenarios with closed-form answers.

Two families are provided.

Mean shift
    Prior ``sigma W_t`` on ``[0, 1]`` in one dimension, marginals ``N(0, 1)``
    and ``N(1, 1)``. The bridge is Gaussian with mean ``t``, variance ``q(t)``
    and forward drift ``(sigma^2 x + c) / (sigma^2 t + c)``.

Smoluchowski
    Planar overdamped motion ``dx = A x dt + sqrt(eps) dw`` with ``A = -3 I``,
    steering ``N((-5, -5), I)`` to ``N((5, 5), I)``.
"""

from __future__ import annotations

import numpy as np

from .gauss_markov import GaussianMarginal, LinearPrior, TimeGrid, bridge_solve

__all__ = [
    "mean_shift_constant",
    "mean_shift_variance",
    "mean_shift_forward_drift",
    "mean_shift_current_velocity",
    "mean_shift_osmotic_velocity",
    "mean_shift_mean",
    "mean_shift_problem",
    "mean_shift_table",
    "smoluchowski_problem",
    "translation_problem",
    "solve",
    "SMOLUCHOWSKI_EPSILONS",
    "MEAN_SHIFT_SIGMA2",
]

SMOLUCHOWSKI_EPSILONS = (9.0, 4.0, 0.01, 0.0)
MEAN_SHIFT_SIGMA2 = (1.0, 0.1, 0.01, 1e-4)


def mean_shift_constant(sigma2):
    """``c = -sigma^2 / (sigma^2 / 2 + 1 - sqrt(1 + sigma^4 / 4))``.

    Evaluated in a cancellation-free form; tends to ``-2`` as ``sigma^2 -> 0``.
    """
    s = float(sigma2)
    if not s > 0:
        raise ValueError("sigma2 must be positive")
    root = np.sqrt(1.0 + s * s / 4.0)
    return -s / (s / 2.0 - (s * s / 4.0) / (1.0 + root))


def mean_shift_variance(t, sigma2):
    """Marginal variance ``q(t) = (1 + c)(sigma^2 t + c)^2 / c^2 - (sigma^2 t + c)``."""
    c = mean_shift_constant(sigma2)
    s = sigma2 * np.asarray(t, dtype=float) + c
    return (1.0 + c) * s * s / (c * c) - s


def mean_shift_forward_drift(x, t, sigma2):
    c = mean_shift_constant(sigma2)
    s = sigma2 * np.asarray(t, dtype=float) + c
    return (sigma2 * np.asarray(x, dtype=float) + c) / s


def mean_shift_osmotic_velocity(x, t, sigma2):
    """``(sigma^2 / 2) d/dx ln rho_t`` for the bridge marginal ``N(t, q(t))``."""
    return 0.5 * sigma2 * (np.asarray(t, dtype=float) - np.asarray(x, dtype=float)) / mean_shift_variance(t, sigma2)


def mean_shift_current_velocity(x, t, sigma2):
    """Current velocity: forward drift minus the osmotic velocity."""
    return mean_shift_forward_drift(x, t, sigma2) - mean_shift_osmotic_velocity(x, t, sigma2)


def mean_shift_mean(sigma2, grid=None):
    """Integrate ``dm/dt = (sigma^2 m + c) / (sigma^2 t + c)``, ``m(0) = 0`` with RK4."""
    grid = grid or TimeGrid(0.0, 1.0, 1000)
    t, h = grid.nodes, grid.dt
    f = lambda m, s: mean_shift_forward_drift(m, s, sigma2)
    m = np.empty_like(t)
    m[0] = 0.0
    for k in range(grid.steps):
        k1 = f(m[k], t[k])
        k2 = f(m[k] + 0.5 * h * k1, t[k] + 0.5 * h)
        k3 = f(m[k] + 0.5 * h * k2, t[k] + 0.5 * h)
        k4 = f(m[k] + h * k3, t[k + 1])
        m[k + 1] = m[k] + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return t, m


def mean_shift_problem(sigma2):
    """``(prior, rho0, rho1)`` for the mean-shift scenario."""
    prior = LinearPrior(np.zeros((1, 1)), float(sigma2))
    return prior, GaussianMarginal([0.0], [[1.0]]), GaussianMarginal([1.0], [[1.0]])


def mean_shift_table(sigma2_values=MEAN_SHIFT_SIGMA2, xs=None, ts=None):
    """Rows ``(sigma2, t, x, forward, current, osmotic)`` over a grid of ``x`` and ``t``."""
    xs = np.linspace(-2.0, 2.0, 9) if xs is None else np.asarray(xs, dtype=float)
    ts = np.linspace(0.0, 1.0, 5) if ts is None else np.asarray(ts, dtype=float)
    rows = []
    for s2 in sigma2_values:
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        tt, xx = tt.ravel(), xx.ravel()
        rows.append(
            np.column_stack(
                [
                    np.full(tt.size, s2),
                    tt,
                    xx,
                    mean_shift_forward_drift(xx, tt, s2),
                    mean_shift_current_velocity(xx, tt, s2),
                    mean_shift_osmotic_velocity(xx, tt, s2),
                ]
            )
        )
    return np.vstack(rows)


def smoluchowski_problem(epsilon):
    """``(prior, rho0, rho1)`` for the planar Smoluchowski scenario."""
    eye = np.eye(2)
    prior = LinearPrior(-3.0 * eye, float(epsilon))
    return prior, GaussianMarginal([-5.0, -5.0], eye), GaussianMarginal([5.0, 5.0], eye)


def translation_problem(epsilon=0.0):
    """Same marginals as :func:`smoluchowski_problem` with a zero prior drift.

    At ``eps = 0`` the bridge is the constant-speed translation ``x + 10 t (1, 1)``.
    """
    _, rho0, rho1 = smoluchowski_problem(epsilon)
    return LinearPrior(np.zeros((2, 2)), float(epsilon)), rho0, rho1


def solve(problem, grid=None):
    """Convenience: ``bridge_solve(*problem, grid)``."""
    prior, rho0, rho1 = problem
    return bridge_solve(prior, rho0, rho1, grid)

"""Euler-Maruyama simulation of linear prior and bridge diffusions.

Noise comes from a counter-based generator: path ``p`` of a run with seed
``s`` owns the Philox stream keyed by ``SeedSequence(s, spawn_key=(p,))``, and
step ``k`` reads a fixed block of that stream. An ensemble is therefore a pure
function of ``(seed, inputs)`` no matter how paths are batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_vector, check_nonnegative, check_positive_int
from .exceptions import SimulationBlowUpError, ValidationError
from .gauss_markov import GaussianMarginal, TimeGrid

__all__ = [
    "PathEnsemble",
    "LinearFeedbackDrift",
    "bridge_drift",
    "prior_drift",
    "simulate",
    "empirical_moments",
    "moment_bands",
    "tube_ellipses",
    "ELLIPSE_COLUMNS",
]

STABILITY_LIMIT = 0.1
BATCH_PATHS = 1024
ELLIPSE_COLUMNS = ("t", "cx", "cy", "r1", "r2", "angle_radians")
_WORDS_PER_BLOCK = 4
_TWO_PI = 2.0 * np.pi


@dataclass
class PathEnsemble:
    """Simulated states ``paths[p, k]`` at the nodes of ``grid``."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    epsilon: float

    def __post_init__(self):
        if self.paths.ndim != 3 or self.paths.shape[0] < 1:
            raise ValidationError("paths must have shape (P >= 1, K + 1, n)")
        if self.paths.shape[1] != self.grid.steps + 1:
            raise ValidationError("paths do not match the time grid")

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def dimension(self):
        return self.paths.shape[2]

    def at(self, t):
        return self.paths[:, self.grid.index(t)]


class LinearFeedbackDrift:
    """Affine drift ``F_k x + m_k`` held constant on ``[t_k, t_{k+1})``.

    Parameters
    ----------
    grid : TimeGrid
        Nodes at which the gains are given.
    gain : ndarray of shape (K + 1, n, n)
        Closed-loop matrices ``F_k``.
    offset : ndarray of shape (K + 1, n), optional
        Open-loop terms ``m_k``; zero if omitted.
    """

    def __init__(self, grid, gain, offset=None):
        self.grid = grid
        self.gain = np.asarray(gain, dtype=float)
        if self.gain.ndim != 3 or self.gain.shape[0] != grid.steps + 1:
            raise ValidationError("gain must have shape (K + 1, n, n) on the grid")
        n = self.gain.shape[1]
        self.offset = np.zeros((grid.steps + 1, n)) if offset is None else np.asarray(offset, dtype=float)
        if self.offset.shape != (grid.steps + 1, n):
            raise ValidationError("offset must have shape (K + 1, n)")

    @property
    def dimension(self):
        return self.gain.shape[1]

    def node(self, t):
        """Index of the node whose gains are held at time ``t``."""
        if self.grid.contains(t):
            try:
                return self.grid.index(t)
            except ValidationError:
                return self.grid.locate(t)
        raise ValidationError(f"time {t} outside the drift's grid")

    def __call__(self, x, t):
        k = self.node(t)
        return x @ self.gain[k].T + self.offset[k]

    def stiffness(self):
        """``max_k ||F_k||_2``."""
        return float(max(np.linalg.norm(g, 2) for g in self.gain))


def bridge_drift(bridge):
    """Forward drift ``(A - Pi) x + m`` of a bridge, zero-order held at nodes."""
    grid = bridge.grid
    a = np.stack([bridge.prior.drift_at(t) for t in grid.nodes])
    return LinearFeedbackDrift(grid, a - bridge.pi, bridge.mean_drift)


def prior_drift(prior, grid):
    """Prior drift ``A(t) x`` held at the nodes of ``grid``."""
    return LinearFeedbackDrift(grid, np.stack([prior.drift_at(t) for t in grid.nodes]))


def _normals(seed, path, count, blocks_per_group):
    """Standard normals for ``count`` groups of one path, by Box-Muller.

    Group ``g`` uses counter blocks ``[g * blocks_per_group, (g + 1) * blocks_per_group)``.
    """
    words_per_group = blocks_per_group * _WORDS_PER_BLOCK
    bitgen = np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path,)))
    raw = bitgen.random_raw(count * words_per_group).reshape(count, words_per_group // 2, 2)
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u[..., 0]))
    angle = _TWO_PI * u[..., 1]
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def simulate(drift, epsilon, init, grid, n_paths, seed):
    """Euler-Maruyama ensemble ``x_{k+1} = x_k + b(x_k, t_k) dt + sqrt(eps dt) xi_k``.

    Parameters
    ----------
    drift : callable
        ``drift(x, t)`` for states ``x`` of shape ``(B, n)``. A
        :class:`LinearFeedbackDrift` is additionally checked for
        ``dt * max ||F|| <= 0.1``.
    epsilon : float
        Diffusion coefficient, ``>= 0``.
    init : GaussianMarginal or array_like
        Initial law; a plain vector is a point mass.
    grid : TimeGrid
    n_paths : int
    seed : int
        Non-negative integer key of the generator.

    Returns
    -------
    PathEnsemble

    Raises
    ------
    SimulationBlowUpError
        If a state becomes non-finite; reports the first bad path and step.
    """
    epsilon = check_nonnegative(epsilon, "epsilon")
    n_paths = check_positive_int(n_paths, "n_paths")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValidationError("seed must be a 64-bit non-negative integer")
    if isinstance(init, GaussianMarginal):
        center, root = init.mean, np.linalg.cholesky(init.covariance)
    else:
        center, root = as_vector(init, "init"), None
    n = center.shape[0]
    if isinstance(drift, LinearFeedbackDrift):
        if drift.dimension != n:
            raise ValidationError("drift dimension does not match the initial law")
        stiff = grid.dt * drift.stiffness()
        if stiff > STABILITY_LIMIT:
            raise ValidationError(
                f"time step too large for Euler-Maruyama: dt*||F|| = {stiff:.3g} > {STABILITY_LIMIT}"
            )

    steps = grid.steps
    nodes = grid.nodes
    blocks = -(-n // _WORDS_PER_BLOCK)
    scale = np.sqrt(epsilon * grid.dt)
    out = np.empty((n_paths, steps + 1, n))
    for lo in range(0, n_paths, BATCH_PATHS):
        ids = range(lo, min(lo + BATCH_PATHS, n_paths))
        noise = np.stack([_normals(seed, p, steps + 1, blocks)[:, :n] for p in ids])
        x = center + (noise[:, 0] @ root.T if root is not None else 0.0)
        block = out[lo : lo + len(ids)]
        block[:, 0] = x
        for k in range(steps):
            x = x + drift(x, nodes[k]) * grid.dt + scale * noise[:, k + 1]
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
                raise SimulationBlowUpError(
                    f"non-finite state on path {lo + bad} at step {k + 1}", path=lo + bad, step=k + 1
                )
            block[:, k + 1] = x
    return PathEnsemble(grid, out, seed, epsilon)


def empirical_moments(ensemble, t):
    """Sample mean and unbiased sample covariance of the ensemble at node ``t``."""
    if ensemble.n_paths < 2:
        raise ValidationError("covariance needs at least 2 paths")
    x = ensemble.at(t)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def moment_bands(covariance, n_paths, sigmas=3.0):
    """Monte Carlo half-widths for the sample mean and covariance of ``n_paths`` Gaussian draws.

    Returns ``(mean_band, covariance_band)``: ``sigmas`` standard errors,
    ``sqrt(S_ii / P)`` per mean entry and ``sqrt((S_ii S_jj + S_ij^2) / (P - 1))``
    per covariance entry.
    """
    s = np.atleast_2d(np.asarray(covariance, dtype=float))
    d = np.diag(s)
    mean_band = sigmas * np.sqrt(d / n_paths)
    cov_band = sigmas * np.sqrt((np.outer(d, d) + s * s) / (n_paths - 1))
    return mean_band, cov_band


def tube_ellipses(bridge, level=9.0):
    """Level sets ``(x - n)' Sigma^{-1} (x - n) = level`` of a planar bridge.

    Returns an array with one row per time node and the columns of
    :data:`ELLIPSE_COLUMNS`: time, center, major and minor semi-axes, and the
    angle of the major axis in ``[0, pi)`` (0 for circles).
    """
    if bridge.dimension != 2:
        raise ValidationError(f"tube ellipses need a planar bridge, got dimension {bridge.dimension}")
    if not level > 0:
        raise ValidationError("level must be positive")
    rows = []
    for t, center, cov in zip(bridge.times, bridge.mean, bridge.covariance):
        vals, vecs = np.linalg.eigh(cov)
        r_minor, r_major = np.sqrt(level * np.clip(vals, 0.0, None))
        if vals[1] - vals[0] <= 1e-12 * vals[1]:
            angle = 0.0
        else:
            angle = float(np.arctan2(vecs[1, 1], vecs[0, 1]) % np.pi)
        rows.append((t, center[0], center[1], r_major, r_minor, angle))
    return np.array(rows)

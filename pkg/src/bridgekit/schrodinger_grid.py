"""Schrodinger system on 1D/2D spatial grids by Fortet / IPF iteration.

For a linear prior with diffusion ``eps > 0`` the transition density between
two times is Gaussian, and the bridge factorizes as ``rho(x, t) =
phi(x, t) * phi_hat(x, t)`` where ``phi`` is propagated backward from ``t1``
and ``phi_hat`` forward from ``t0`` by the prior kernel. The solver works with
log-potentials throughout so that sharp kernels do not underflow.

Drift conventions (diffusion ``eps``):

* forward   ``b+ = A x + eps grad log phi``
* backward  ``b- = b-^P - eps grad log psi`` with ``psi = phi_hat / rho_prior``
  and ``b-^P = A x - eps grad log rho_prior``
* current   ``v = (b+ + b-) / 2``
* osmotic   ``u = (b+ - b-) / 2 = (eps / 2) grad log rho``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from ._validation import as_vector, check_positive_int
from .exceptions import (
    NonConvergenceError,
    NumericalUnderflowError,
    UnderResolvedKernelError,
    ValidationError,
)
from .gauss_markov import gramian, transition

__all__ = [
    "SpatialGrid",
    "GridDensity",
    "GridKernel",
    "PotentialPair",
    "DriftField",
    "kernel",
    "fortet_solve",
    "potentials_at",
    "marginal_at",
    "prior_density_at",
    "bridge_log_density",
    "forward_drift",
    "backward_drift",
    "symmetric_drifts",
]

logger = logging.getLogger(__name__)

SUPPORT_FLOOR = 1e-30
POSITIVITY_FLOOR = 1e-300
MASS_DRIFT_LIMIT = 1e-4
MIN_POINTS = 16
DOMAIN_SIGMAS = 6.0


@dataclass(frozen=True)
class SpatialGrid:
    """Tensor grid with uniform spacing per axis (``d`` in {1, 2})."""

    lower: tuple
    upper: tuple
    points: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        points = tuple(check_positive_int(p, "points", MIN_POINTS) for p in np.atleast_1d(self.points))
        if not (len(lower) == len(upper) == len(points)) or len(lower) not in (1, 2):
            raise ValidationError("spatial grid needs matching lower/upper/points of dimension 1 or 2")
        for lo, hi in zip(lower, upper):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValidationError(f"invalid axis bounds [{lo}, {hi}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "points", points)

    @property
    def dimension(self):
        return len(self.points)

    @property
    def shape(self):
        return self.points

    @property
    def size(self):
        return int(np.prod(self.points))

    @property
    def spacing(self):
        return tuple((hi - lo) / (p - 1) for lo, hi, p in zip(self.lower, self.upper, self.points))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self):
        return tuple(np.linspace(lo, hi, p) for lo, hi, p in zip(self.lower, self.upper, self.points))

    @cached_property
    def coordinates(self):
        """Node coordinates, shape ``grid.shape + (d,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def flat_coordinates(self):
        return self.coordinates.reshape(-1, self.dimension)

    def integrate(self, values):
        """Cell-volume-weighted sum over the grid axes (leading axes kept)."""
        values = np.asarray(values)
        axes = tuple(range(values.ndim - self.dimension, values.ndim))
        return np.sum(values, axis=axes) * self.cell_volume

    def gradient(self, values):
        """Second-order gradient, one-sided second order at the boundary; last axis is the component."""
        if self.dimension == 1:
            return np.gradient(values, self.spacing[0], edge_order=2)[..., None]
        parts = np.gradient(values, *self.spacing, edge_order=2)
        return np.stack(parts, axis=-1)


@dataclass
class GridDensity:
    grid: SpatialGrid
    values: np.ndarray
    raw_mass: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValidationError(f"density shape {values.shape} != grid shape {self.grid.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValidationError("density values must be finite and nonnegative")
        self.values = values

    @classmethod
    def normalized(cls, grid, values):
        values = np.asarray(values, dtype=float)
        mass = grid.integrate(values)
        if mass <= 0:
            raise ValidationError("density has zero mass on the grid")
        return cls(grid, values / mass, raw_mass=float(mass))

    @classmethod
    def from_gaussian(cls, grid, mean, covariance, check_domain=True):
        """Discretize ``N(mean, covariance)``; the domain must cover 6 standard deviations."""
        mean = as_vector(mean, "mean", dim=grid.dimension)
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if check_domain:
            sd = np.sqrt(np.diag(cov))
            for i in range(grid.dimension):
                if mean[i] - DOMAIN_SIGMAS * sd[i] < grid.lower[i] or mean[i] + DOMAIN_SIGMAS * sd[i] > grid.upper[i]:
                    raise ValidationError(
                        f"axis {i}: domain [{grid.lower[i]}, {grid.upper[i]}] does not contain "
                        f"{DOMAIN_SIGMAS:g} standard deviations around {mean[i]}"
                    )
        x = grid.coordinates - mean
        quad = np.sum(x * np.linalg.solve(cov, x.reshape(-1, grid.dimension).T).T.reshape(x.shape), axis=-1)
        return cls.normalized(grid, np.exp(-0.5 * quad))

    @property
    def mass(self):
        return float(self.grid.integrate(self.values))

    def moments(self):
        """Mean and covariance of the (normalized) density."""
        w = self.values / self.grid.integrate(self.values) * self.grid.cell_volume
        x = self.grid.flat_coordinates
        w = w.reshape(-1)
        mean = w @ x
        d = x - mean
        return mean, (d * w[:, None]).T @ d

    def l1_distance(self, other):
        other = other.values if isinstance(other, GridDensity) else np.asarray(other)
        return float(self.grid.integrate(np.abs(self.values - other)))


@dataclass(frozen=True)
class GridKernel:
    """Row-stochastic transition matrix over flattened grid nodes, kept in log form."""

    grid: SpatialGrid
    s: float
    t: float
    log_matrix: np.ndarray

    @cached_property
    def matrix(self):
        return np.exp(self.log_matrix)

    def _log_matvec(self, mat, log_matrix, log_v, axis):
        # max-shifted dense product; exact logsumexp only when a row underflows
        shift = np.max(log_v)
        prod = mat @ np.exp(log_v - shift)
        if np.all(prod > 1e-250):
            return np.log(prod) + shift
        return logsumexp(log_matrix + np.expand_dims(log_v, axis), axis=1 - axis)

    def apply(self, log_f):
        """``log(K f)``: integrate ``f`` over destination nodes."""
        out = self._log_matvec(self.matrix, self.log_matrix, log_f.reshape(-1), 0)
        return out.reshape(self.grid.shape)

    def apply_transpose(self, log_g):
        """``log(K' g)``: push ``g`` forward from source nodes."""
        out = self._log_matvec(self.matrix.T, self.log_matrix, log_g.reshape(-1), 1)
        return out.reshape(self.grid.shape)


def kernel(prior, grid, s, t):
    """Discrete prior transition kernel from time ``s`` to ``t``.

    ``K[x, y]`` is proportional to the Gaussian transition density
    ``N(y; Phi(t, s) x, eps M(t, s))`` and each row is normalized to one.
    Raises :class:`UnderResolvedKernelError` when the transition standard
    deviation along an axis is below the grid spacing.
    """
    if not s < t:
        raise ValidationError(f"kernel needs s < t, got s={s}, t={t}")
    if prior.epsilon <= 0.0:
        raise ValidationError("grid kernel requires a prior with epsilon > 0")
    if prior.dimension != grid.dimension:
        raise ValidationError(f"prior dimension {prior.dimension} != grid dimension {grid.dimension}")
    phi = transition(prior, s, t)
    cov = prior.epsilon * gramian(prior, s, t)
    sd = np.sqrt(np.diag(cov))
    h = np.array(grid.spacing)
    if np.any(sd < h):
        required = float(np.min(sd))
        raise UnderResolvedKernelError(
            f"transition standard deviation {sd.min():.3e} over [{s}, {t}] is below the grid spacing "
            f"{h.max():.3e}; use spacing <= {required:.3e}",
            required_spacing=required,
        )
    x = grid.flat_coordinates
    mean = x @ phi.T
    prec = np.linalg.inv(cov)
    d = x[None, :, :] - mean[:, None, :]
    log_k = -0.5 * np.einsum("ijk,kl,ijl->ij", d, prec, d)
    log_k -= logsumexp(log_k, axis=1, keepdims=True)
    return GridKernel(grid, float(s), float(t), log_k)


@dataclass
class PotentialPair:
    """Converged Schrodinger potentials ``phi(., t1)`` and ``phi_hat(., t0)``.

    Stored as logarithms; ``phi_end`` and ``phi_hat_start`` exponentiate.
    """

    kernel: GridKernel
    log_phi_end: np.ndarray
    log_phi_hat_start: np.ndarray
    rho0: GridDensity
    rho1: GridDensity
    iterations: int
    gap_start: float
    gap_end: float
    gap_history: list = field(default_factory=list)

    @property
    def grid(self):
        return self.kernel.grid

    @property
    def t0(self):
        return self.kernel.s

    @property
    def t1(self):
        return self.kernel.t

    @property
    def phi_end(self):
        return np.exp(self.log_phi_end)

    @property
    def phi_hat_start(self):
        return np.exp(self.log_phi_hat_start)


def _log_density(density):
    values = np.maximum(density.values, POSITIVITY_FLOOR)
    return np.log(values / density.grid.integrate(values))


def fortet_solve(kern, rho0, rho1, tol=1e-8, max_iter=10_000):
    """Solve the discrete Schrodinger system by alternating proportional fitting.

    One sweep is::

        phi(., t0)     = K phi_end
        phi_hat_start  = rho0 / phi(., t0)
        phi_hat(., t1) = K' phi_hat_start
        phi_end        = rho1 / phi_hat(., t1)

    The L1 gaps of both boundary products are measured every sweep; the
    iteration stops once both are ``<= tol``. The returned potentials are
    gauge-fixed so that ``sum(phi_end) == sum(phi_hat(., t1))``.
    """
    grid = kern.grid
    for name, rho in (("rho0", rho0), ("rho1", rho1)):
        if rho.grid != grid:
            raise ValidationError(f"{name} lives on a different grid")
    log_rho0 = _log_density(rho0)
    log_rho1 = _log_density(rho1)
    p0 = np.exp(log_rho0)
    p1 = np.exp(log_rho1)
    log_phi_end = np.zeros(grid.shape)
    history = []
    gap0 = gap1 = np.inf
    for it in range(1, max_iter + 1):
        log_phi0 = kern.apply(log_phi_end)
        log_phi_hat_start = log_rho0 - log_phi0
        log_phi_hat1 = kern.apply_transpose(log_phi_hat_start)
        gap1 = float(grid.integrate(np.abs(np.exp(log_phi_end + log_phi_hat1) - p1)))
        log_phi_end = log_rho1 - log_phi_hat1
        log_phi0 = kern.apply(log_phi_end)
        gap0 = float(grid.integrate(np.abs(np.exp(log_phi0 + log_phi_hat_start) - p0)))
        if not (np.all(np.isfinite(log_phi_end)) and np.all(np.isfinite(log_phi_hat_start))):
            raise NumericalUnderflowError(
                "a potential reached zero or overflowed; widen the grid or raise epsilon"
            )
        history.append(max(gap0, gap1))
        if gap0 <= tol and gap1 <= tol:
            break
    else:
        raise NonConvergenceError(
            f"Fortet iteration did not reach tol={tol:g} in {max_iter} sweeps (last gap {max(gap0, gap1):.3e})",
            last_gap=max(gap0, gap1),
        )
    # phi_hat_start stays consistent with the final phi_end (gap0 was measured with it)
    log_phi_hat1 = kern.apply_transpose(log_phi_hat_start)
    shift = 0.5 * (logsumexp(log_phi_end) - logsumexp(log_phi_hat1))
    return PotentialPair(
        kernel=kern,
        log_phi_end=log_phi_end - shift,
        log_phi_hat_start=log_phi_hat_start + shift,
        rho0=rho0,
        rho1=rho1,
        iterations=it,
        gap_start=gap0,
        gap_end=gap1,
        gap_history=history,
    )


def _is_time(t, ref):
    return abs(t - ref) <= 1e-12 * max(1.0, abs(ref))


def _log_potentials(pair, prior, t):
    if not (pair.t0 - 1e-12 <= t <= pair.t1 + 1e-12):
        raise ValidationError(f"t={t} outside [{pair.t0}, {pair.t1}]")
    if _is_time(t, pair.t1):
        log_phi = pair.log_phi_end
    elif _is_time(t, pair.t0):
        log_phi = pair.kernel.apply(pair.log_phi_end)
    else:
        log_phi = kernel(prior, pair.grid, t, pair.t1).apply(pair.log_phi_end)
    if _is_time(t, pair.t0):
        log_phi_hat = pair.log_phi_hat_start
    elif _is_time(t, pair.t1):
        log_phi_hat = pair.kernel.apply_transpose(pair.log_phi_hat_start)
    else:
        log_phi_hat = kernel(prior, pair.grid, pair.t0, t).apply_transpose(pair.log_phi_hat_start)
    return log_phi, log_phi_hat


def potentials_at(pair, prior, grid, t):
    """``(phi(., t), phi_hat(., t))`` on the grid."""
    _check_grid(pair, grid)
    log_phi, log_phi_hat = _log_potentials(pair, prior, t)
    return np.exp(log_phi), np.exp(log_phi_hat)


def _check_grid(pair, grid):
    if grid != pair.grid:
        raise ValidationError("grid does not match the grid the potentials were solved on")


def marginal_at(pair, prior, grid, t):
    """Bridge marginal ``phi * phi_hat`` at time ``t``, renormalized.

    ``raw_mass`` on the result records the mass before renormalization; a
    deviation from one above ``1e-4`` is logged.
    """
    _check_grid(pair, grid)
    log_phi, log_phi_hat = _log_potentials(pair, prior, t)
    values = np.exp(log_phi + log_phi_hat)
    density = GridDensity.normalized(grid, values)
    if abs(density.raw_mass - 1.0) > MASS_DRIFT_LIMIT:
        logger.warning("marginal at t=%.6g has mass %.6g before renormalization", t, density.raw_mass)
    return density


def prior_density_at(pair, prior, t):
    """Log one-time density of the prior started from ``rho0``."""
    log_rho0 = _log_density(pair.rho0)
    if _is_time(t, pair.t0):
        return log_rho0
    return kernel(prior, pair.grid, pair.t0, t).apply_transpose(log_rho0)


@dataclass
class DriftField:
    grid: SpatialGrid
    t: float
    values: np.ndarray
    kind: str
    mask: np.ndarray

    KINDS = ("forward", "backward", "current", "osmotic")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"drift kind must be one of {self.KINDS}")


def _linear_part(prior, grid, t):
    return grid.coordinates @ prior.drift_at(t).T


def _support_mask(*log_densities):
    mask = np.ones(log_densities[0].shape, dtype=bool)
    for log_d in log_densities:
        mask &= log_d > np.log(SUPPORT_FLOOR)
    return mask


def _bridge_log_density(log_phi, log_phi_hat, grid):
    log_rho = log_phi + log_phi_hat
    return log_rho - np.log(grid.integrate(np.exp(log_rho)))


def _masked(values, mask):
    out = values.copy()
    out[~mask] = np.nan
    return out


def forward_drift(pair, prior, grid, t):
    """``b+ = A(t) x + eps grad log phi(x, t)``; nodes below the support floor are NaN."""
    _check_grid(pair, grid)
    log_phi, log_phi_hat = _log_potentials(pair, prior, t)
    mask = _support_mask(_bridge_log_density(log_phi, log_phi_hat, grid))
    b = _linear_part(prior, grid, t) + prior.epsilon * grid.gradient(log_phi)
    return DriftField(grid, t, _masked(b, mask), "forward", mask)


def backward_drift(pair, prior, grid, t, log_prior_density=None):
    """``b- = b-^P - eps grad log psi`` with ``psi = phi_hat / rho_prior``.

    ``log_prior_density`` is the log of the prior one-time density at ``t``; by
    default it is computed by pushing ``rho0`` through the prior kernel.
    """
    _check_grid(pair, grid)
    log_phi, log_phi_hat = _log_potentials(pair, prior, t)
    if log_prior_density is None:
        log_prior_density = prior_density_at(pair, prior, t)
    eps = prior.epsilon
    mask = _support_mask(_bridge_log_density(log_phi, log_phi_hat, grid), log_prior_density)
    b_prior = _linear_part(prior, grid, t) - eps * grid.gradient(log_prior_density)
    b = b_prior - eps * grid.gradient(log_phi_hat - log_prior_density)
    return DriftField(grid, t, _masked(b, mask), "backward", mask)


def symmetric_drifts(pair, prior, grid, t):
    """Current ``(b+ + b-)/2`` and osmotic ``(b+ - b-)/2`` drift fields."""
    fwd = forward_drift(pair, prior, grid, t)
    bwd = backward_drift(pair, prior, grid, t)
    mask = fwd.mask & bwd.mask
    current = DriftField(grid, t, _masked(0.5 * (fwd.values + bwd.values), mask), "current", mask)
    osmotic = DriftField(grid, t, _masked(0.5 * (fwd.values - bwd.values), mask), "osmotic", mask)
    return current, osmotic


def bridge_log_density(pair, prior, t):
    """Normalized log bridge density at ``t`` (used for Nelson-relation checks)."""
    log_phi, log_phi_hat = _log_potentials(pair, prior, t)
    return _bridge_log_density(log_phi, log_phi_hat, pair.grid)

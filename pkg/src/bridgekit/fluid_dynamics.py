"""Fluid-dynamic functionals and PDE residuals for density flows.

A :class:`FlowSample` is a density flow ``rho(x, t_k)`` with a velocity field
``v(x, t_k)`` on a shared spatial grid and time grid. The evaluators here turn
optimality statements into numbers:

* ``continuity_residual``  ``d rho/dt + div(v rho)``
* ``hj_residual``          ``d psi/dt + v_prior . grad psi + |grad psi|^2 / 2``
* ``bb_action``            ``int int |v|^2 / 2 rho``
* ``prior_action``         ``int int |v - v_prior|^2 / 2 rho``
* ``sb_action``            ``int int (|v|^2 / 2 + eps^2 / 8 |grad log rho|^2) rho``

Time integrals use the trapezoid rule, space integrals cell sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import BarycentricInterpolator

from ._linalg import hermite_midpoints, simpson
from .exceptions import ValidationError
from .gauss_markov import TimeGrid, _closed_loop_stages
from .schrodinger_grid import SUPPORT_FLOOR, SpatialGrid

__all__ = [
    "FlowSample",
    "QuadraticPotential",
    "Residual",
    "flow_from_bridge",
    "continuity_residual",
    "hj_residual",
    "bb_action",
    "prior_action",
    "sb_action",
    "gaussian_actions",
    "divergence_free_perturbation",
]

STENCIL = 7


@dataclass
class FlowSample:
    """Density and velocity sampled on ``grid`` at the nodes of ``times``.

    ``density`` has shape ``(T,) + grid.shape``; ``velocity`` has shape
    ``(T,) + grid.shape + (d,)``.
    """

    grid: SpatialGrid
    times: TimeGrid
    density: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        nt = self.times.steps + 1
        self.density = np.asarray(self.density, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.density.shape != (nt,) + self.grid.shape:
            raise ValidationError(f"density shape {self.density.shape} != {(nt,) + self.grid.shape}")
        if self.velocity.shape != (nt,) + self.grid.shape + (self.grid.dimension,):
            raise ValidationError(f"velocity shape {self.velocity.shape} does not match the grids")
        if np.any(self.density < 0):
            raise ValidationError("density flow has negative values")

    def with_velocity(self, velocity):
        return FlowSample(self.grid, self.times, self.density, velocity)


@dataclass
class Residual:
    field: np.ndarray
    max_abs: float


def flow_from_bridge(bridge, grid, times, velocity="current"):
    """Sample a :class:`~bridgekit.gauss_markov.GaussMarkovBridge` on a grid.

    ``velocity="current"`` uses the marginal-transporting drift (equal to the
    forward drift when ``eps = 0``); ``"forward"`` uses the forward drift.
    """
    if grid.dimension != bridge.dimension:
        raise ValidationError("grid dimension does not match the bridge")
    x = grid.coordinates
    dens, vel = [], []
    for t in times.nodes:
        dens.append(bridge.density(x, t))
        if velocity == "current":
            vel.append(bridge.current_velocity(x, t))
        elif velocity == "forward":
            vel.append(bridge.forward_velocity(x, t))
        else:
            raise ValidationError(f"unknown velocity kind {velocity!r}")
    return FlowSample(grid, times, np.stack(dens), np.stack(vel))


def prior_velocity_field(prior, grid, times):
    """``A(t) x`` sampled like a :class:`FlowSample` velocity."""
    x = grid.coordinates
    return np.stack([x @ prior.drift_at(t).T for t in times.nodes])


def continuity_residual(flow):
    """``d rho/dt + div(v rho)`` with central differences in ``t`` and ``x``."""
    if flow.times.steps < 2:
        raise ValidationError("continuity residual needs at least 3 time nodes")
    grid = flow.grid
    drho = np.gradient(flow.density, flow.times.dt, axis=0, edge_order=2)
    flux = flow.velocity * flow.density[..., None]
    div = np.zeros_like(flow.density)
    for i, h in enumerate(grid.spacing):
        div += np.gradient(flux[..., i], h, axis=1 + i, edge_order=2)
    res = drho + div
    return Residual(res, float(np.max(np.abs(res))))


# ---------------------------------------------------------------------------
# Hamilton-Jacobi


@dataclass
class QuadraticPotential:
    """``psi(x, t) = -x' Pi(t) x / 2 + m(t)' x + c(t)`` stored at time-grid nodes.

    Values and time derivatives between nodes come from a local degree-6
    polynomial through the 7 nearest nodes, so the derivatives are those of
    the stored sequences themselves.
    """

    times: TimeGrid
    pi: np.ndarray
    m: np.ndarray
    c: np.ndarray

    @classmethod
    def from_bridge(cls, bridge):
        """Potential whose gradient is the bridge control ``(A - Pi) x + m - A x``.

        ``c(t) = -int_{t0}^t |m|^2 / 2``, accumulated with per-interval Simpson
        rules whose midpoint values of ``m`` come from Hermite interpolation
        with the exact slope ``dm/dt = -(A - Pi)' m``.
        """
        m = bridge.mean_drift
        f_left, _, f_right = _closed_loop_stages(bridge.pi, bridge.prior, bridge.grid)
        slope_left = -np.einsum("kji,kj->ki", f_left, m[:-1])
        slope_right = -np.einsum("kji,kj->ki", f_right, m[1:])
        m_mid = hermite_midpoints(m, slope_left, slope_right, bridge.grid.dt)
        speed = 0.5 * np.sum(m * m, axis=1)
        speed_mid = 0.5 * np.sum(m_mid * m_mid, axis=1)
        steps = bridge.grid.dt / 6.0 * (speed[:-1] + 4.0 * speed_mid + speed[1:])
        c = -np.concatenate([[0.0], np.cumsum(steps)])
        return cls(bridge.grid, bridge.pi.copy(), m.copy(), c)

    def __post_init__(self):
        nt = self.times.steps + 1
        if self.pi.shape[0] != nt or self.m.shape[0] != nt or self.c.shape[0] != nt:
            raise ValidationError("potential sequences must match the time grid")

    @property
    def dimension(self):
        return self.m.shape[1]

    def _local(self, t):
        k = self.times.locate(t)
        lo = min(max(k - STENCIL // 2 + 1, 0), self.times.steps + 1 - STENCIL)
        idx = slice(lo, lo + STENCIL)
        nodes = (self.times.nodes[idx] - t) / self.times.dt
        n = self.dimension
        stacked = np.concatenate(
            [self.pi[idx].reshape(STENCIL, -1), self.m[idx], self.c[idx, None]], axis=1
        )
        poly = BarycentricInterpolator(nodes, stacked, axis=0)
        value = poly(0.0)
        deriv = poly.derivative(0.0) / self.times.dt
        split = lambda v: (v[: n * n].reshape(n, n), v[n * n : n * n + n], v[-1])
        return split(value), split(deriv)

    def gradient(self, x, t):
        (pi, m, _), _ = self._local(t)
        return -np.asarray(x) @ pi + m

    def value(self, x, t):
        (pi, m, c), _ = self._local(t)
        x = np.asarray(x)
        return -0.5 * np.einsum("...i,ij,...j->...", x, pi, x) + x @ m + c

    def time_derivative(self, x, t):
        _, (dpi, dm, dc) = self._local(t)
        x = np.asarray(x)
        return -0.5 * np.einsum("...i,ij,...j->...", x, dpi, x) + x @ dm + dc


def hj_residual(psi, prior_velocity, points=None, times=None, grid=None):
    """Hamilton-Jacobi residual ``d psi/dt + v . grad psi + |grad psi|^2 / 2``.

    For a :class:`QuadraticPotential` the residual is evaluated analytically
    in ``x`` at ``points`` (shape ``(P, n)``) and ``times`` (shape ``(P,)``);
    ``prior_velocity`` is a callable ``v(x, t)``.

    For a gridded potential, ``psi`` has shape ``(T,) + grid.shape`` on
    ``times`` (a :class:`TimeGrid`), ``prior_velocity`` has the velocity layout
    of :class:`FlowSample`, and derivatives are finite differences.
    """
    if isinstance(psi, QuadraticPotential):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        times = np.broadcast_to(np.asarray(times, dtype=float), points.shape[:1])
        res = np.empty(points.shape[0])
        for i, (x, t) in enumerate(zip(points, times)):
            grad = psi.gradient(x, t)
            v = np.asarray(prior_velocity(x, t))
            res[i] = psi.time_derivative(x, t) + v @ grad + 0.5 * grad @ grad
        return Residual(res, float(np.max(np.abs(res))))
    if grid is None or times is None:
        raise ValidationError("gridded potentials need grid and times")
    psi = np.asarray(psi, dtype=float)
    dpsi = np.gradient(psi, times.dt, axis=0, edge_order=2)
    grad = np.stack([grid.gradient(p) for p in psi])
    v = np.asarray(prior_velocity)
    res = dpsi + np.sum(v * grad, axis=-1) + 0.5 * np.sum(grad * grad, axis=-1)
    return Residual(res, float(np.max(np.abs(res))))


# ---------------------------------------------------------------------------
# actions


def _time_space_integral(flow, integrand):
    per_time = flow.grid.integrate(integrand)
    return float(integrate.trapezoid(per_time, dx=flow.times.dt))


def bb_action(flow):
    """Kinetic action ``int int |v|^2 / 2 rho dx dt``."""
    return _time_space_integral(flow, 0.5 * np.sum(flow.velocity**2, axis=-1) * flow.density)


def prior_action(flow, prior_velocity):
    """Action relative to a prior velocity field, ``int int |v - v_prior|^2 / 2 rho``."""
    diff = flow.velocity - np.asarray(prior_velocity)
    return _time_space_integral(flow, 0.5 * np.sum(diff**2, axis=-1) * flow.density)


def fisher_density(flow):
    """``|grad log rho|^2 rho`` per node; zero below the support floor."""
    rho = flow.density
    mask = rho > SUPPORT_FLOOR
    log_rho = np.log(np.where(mask, rho, 1.0))
    grad = np.stack([flow.grid.gradient(lr) for lr in log_rho])
    return np.where(mask, np.sum(grad**2, axis=-1) * rho, 0.0)


def sb_action(flow, epsilon):
    """Bridge action ``int int (|v|^2 / 2 + eps^2 / 8 |grad log rho|^2) rho``."""
    if epsilon == 0:
        return bb_action(flow)
    kinetic = 0.5 * np.sum(flow.velocity**2, axis=-1) * flow.density
    return _time_space_integral(flow, kinetic + epsilon**2 / 8.0 * fisher_density(flow))


def gaussian_actions(bridge):
    """The three actions of a Gauss-Markov bridge from its moments (no spatial grid).

    With ``rho = N(n, S)`` and affine velocity ``G x + g``,
    ``E |G x + g|^2 = tr(G S G') + |G n + g|^2``; the Fisher information is
    ``tr(S^{-1})``. Time integrals use Simpson on the bridge grid.
    """
    eps = bridge.epsilon
    kin, rel, fisher = [], [], []
    for k, t in enumerate(bridge.times):
        a = bridge.prior.drift_at(t)
        s = bridge.covariance[k]
        n = bridge.mean[k]
        s_inv = np.linalg.inv(s)
        gain = a - bridge.pi[k] + 0.5 * eps * s_inv
        offset = bridge.mean_drift[k] - 0.5 * eps * s_inv @ n
        kin.append(np.trace(gain @ s @ gain.T) + np.sum((gain @ n + offset) ** 2))
        rg = gain - a
        rel.append(np.trace(rg @ s @ rg.T) + np.sum((rg @ n + offset) ** 2))
        fisher.append(np.trace(s_inv))
    dt = bridge.grid.dt
    bb = 0.5 * simpson(np.array(kin), dt)
    return {
        "bb_action": float(bb),
        "prior_action": float(0.5 * simpson(np.array(rel), dt)),
        "sb_action": float(bb + eps**2 / 8.0 * simpson(np.array(fisher), dt)),
    }


def divergence_free_perturbation(flow, weight, amplitude=1.0):
    """Velocity perturbation ``w`` with ``div(w rho) = 0`` that vanishes at both ends.

    ``w rho = a sin(pi s) J grad(rho q)`` with ``J`` the quarter rotation,
    ``s`` the normalized time and ``q = weight(x, t)`` a smooth scalar field, so
    ``w = a sin(pi s) J (grad q + q grad log rho)``. Adding ``w`` to the
    velocity leaves the density flow, hence both endpoint marginals, unchanged.
    Two-dimensional grids only.
    """
    grid = flow.grid
    if grid.dimension != 2:
        raise ValidationError("divergence-free perturbations need a 2D grid")
    x = grid.coordinates
    out = np.zeros_like(flow.velocity)
    span = flow.times.span
    for k, t in enumerate(flow.times.nodes):
        rho = flow.density[k]
        mask = rho > SUPPORT_FLOOR
        q = weight(x, t)
        grad = grid.gradient(rho * q)
        w = np.stack([-grad[..., 1], grad[..., 0]], axis=-1) / np.where(mask, rho, 1.0)[..., None]
        w[~mask] = 0.0
        out[k] = amplitude * np.sin(np.pi * (t - flow.times.t_start) / span) * w
    return out

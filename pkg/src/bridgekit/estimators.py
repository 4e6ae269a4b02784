"""Estimator front ends in the scikit-learn style.

:class:`GaussianBridge` fits Gaussian endpoint laws to two samples and solves
the closed-form bridge; ``transform`` then carries points of the initial law
along the deterministic mass-transporting flow. :class:`GridSchrodingerBridge`
solves the Schrodinger system on a spatial grid.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import schrodinger_grid as sg
from .exceptions import ValidationError
from .gauss_markov import GaussianMarginal, LinearPrior, TimeGrid, bridge_solve
from .sde_sim import bridge_drift, simulate

__all__ = ["GaussianBridge", "GridSchrodingerBridge", "gaussian_from_samples"]


def gaussian_from_samples(x, name="X"):
    """Sample mean and unbiased covariance of an ``(n_samples, n_features)`` array."""
    x = check_array(x, ensure_min_samples=2, input_name=name)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return GaussianMarginal(x.mean(axis=0), cov)


def _as_marginal(obj, name):
    if isinstance(obj, GaussianMarginal):
        return obj
    return gaussian_from_samples(obj, name)


def _prior(drift, epsilon, n):
    a = np.zeros((n, n)) if drift is None else np.atleast_2d(np.asarray(drift, dtype=float))
    if a.shape != (n, n):
        raise ValidationError(f"drift must be {n}x{n}, got shape {a.shape}")
    return LinearPrior(a, epsilon)


class GaussianBridge(TransformerMixin, BaseEstimator):
    """Schrodinger bridge between two Gaussian laws under a linear prior.

    Parameters
    ----------
    drift : array_like of shape (n_features, n_features), default=None
        Prior drift matrix ``A``; zero if omitted.
    epsilon : float, default=1.0
        Prior diffusion coefficient; ``0`` gives optimal transport with prior.
    t_start, t_end : float, default=0.0, 1.0
        Time horizon.
    steps : int, default=None
        Number of time steps; ``1000`` per unit time if omitted.

    Attributes
    ----------
    bridge_ : GaussMarkovBridge
        The solved bridge.
    flow_maps_ : ndarray of shape (steps + 1, n_features, n_features)
        Linear part ``L(t_k)`` of the flow map ``x -> n(t) + L(t) (x - n(t0))``
        generated by the current velocity.
    n_features_in_ : int

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> x0 = rng.normal(size=(500, 2))
    >>> x1 = rng.normal(size=(500, 2)) + 3.0
    >>> model = GaussianBridge(epsilon=0.5).fit(x0, x1)
    >>> model.transform(x0).shape
    (500, 2)
    """

    def __init__(self, drift=None, epsilon=1.0, t_start=0.0, t_end=1.0, steps=None):
        self.drift = drift
        self.epsilon = epsilon
        self.t_start = t_start
        self.t_end = t_end
        self.steps = steps

    def _grid(self):
        if self.steps is None:
            return TimeGrid.default(self.t_start, self.t_end)
        return TimeGrid(self.t_start, self.t_end, self.steps)

    def fit(self, X0, X1):
        """Fit endpoint Gaussians to the two samples and solve the bridge.

        ``X0`` and ``X1`` may also be :class:`GaussianMarginal` instances.
        """
        rho0 = _as_marginal(X0, "X0")
        rho1 = _as_marginal(X1, "X1")
        if rho0.dimension != rho1.dimension:
            raise ValidationError("X0 and X1 have different numbers of features")
        prior = _prior(self.drift, self.epsilon, rho0.dimension)
        self.bridge_ = bridge_solve(prior, rho0, rho1, self._grid())
        self.flow_maps_ = _flow_maps(self.bridge_)
        self.n_features_in_ = rho0.dimension
        return self

    def _check_X(self, X):
        check_is_fitted(self, "bridge_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def interpolate(self, X, t):
        """Carry points of the initial law to time ``t`` along the current velocity.

        Between grid nodes the flow map is interpolated linearly.
        """
        X = self._check_X(X)
        grid = self.bridge_.grid
        k = grid.locate(t)
        w = (t - grid.nodes[k]) / grid.dt
        lin = (1.0 - w) * self.flow_maps_[k] + w * self.flow_maps_[k + 1]
        center = (1.0 - w) * self.bridge_.mean[k] + w * self.bridge_.mean[k + 1]
        return center + (X - self.bridge_.mean[0]) @ lin.T

    def transform(self, X):
        """Image of ``X`` under the flow map at ``t_end``."""
        return self.interpolate(X, self.t_end)

    def sample_paths(self, n_paths, seed=0):
        """Euler-Maruyama sample paths of the bridge, shape ``(n_paths, steps + 1, n_features)``."""
        check_is_fitted(self, "bridge_")
        b = self.bridge_
        return simulate(bridge_drift(b), b.epsilon, b.initial, b.grid, n_paths, seed).paths


def _flow_maps(bridge):
    """RK4 for ``dL/dt = (A - Pi + (eps/2) Sigma^{-1}) L``, ``L(t0) = I``."""
    grid = bridge.grid
    eps = bridge.epsilon
    n = bridge.dimension

    def gain(t):
        a, pi_t, _, _, sig_t = bridge._state_at(t)
        g = a - pi_t
        if eps > 0:
            g = g + 0.5 * eps * np.linalg.inv(sig_t)
        return g

    h = grid.dt
    nodes = grid.nodes
    out = np.empty((grid.steps + 1, n, n))
    out[0] = np.eye(n)
    g_left = gain(nodes[0])
    for k in range(grid.steps):
        g_mid = gain(nodes[k] + 0.5 * h)
        g_right = gain(nodes[k + 1])
        lk = out[k]
        k1 = g_left @ lk
        k2 = g_mid @ (lk + 0.5 * h * k1)
        k3 = g_mid @ (lk + 0.5 * h * k2)
        k4 = g_right @ (lk + h * k3)
        out[k + 1] = lk + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        g_left = g_right
    return out


class GridSchrodingerBridge(BaseEstimator):
    """Schrodinger bridge on a rectangular grid by Fortet / IPF iteration.

    Parameters
    ----------
    lower, upper : array_like of shape (n_features,)
        Domain corners.
    points : int or sequence of int
        Grid nodes per axis.
    drift : array_like, default=None
        Prior drift matrix ``A``; zero if omitted.
    epsilon : float, default=1.0
        Prior diffusion, must be positive.
    t_start, t_end : float, default=0.0, 1.0
    tol : float, default=1e-8
        L1 tolerance on both endpoint marginals.
    max_iter : int, default=10000

    Attributes
    ----------
    potentials_ : PotentialPair
    grid_ : SpatialGrid
    prior_ : LinearPrior
    n_iter_ : int
    """

    def __init__(
        self,
        lower,
        upper,
        points,
        drift=None,
        epsilon=1.0,
        t_start=0.0,
        t_end=1.0,
        tol=1e-8,
        max_iter=10_000,
    ):
        self.lower = lower
        self.upper = upper
        self.points = points
        self.drift = drift
        self.epsilon = epsilon
        self.t_start = t_start
        self.t_end = t_end
        self.tol = tol
        self.max_iter = max_iter

    def _density(self, obj, grid, name):
        if isinstance(obj, sg.GridDensity):
            if obj.grid != grid:
                raise ValidationError(f"{name} lives on a different grid")
            return obj
        marginal = _as_marginal(obj, name)
        return sg.GridDensity.from_gaussian(grid, marginal.mean, marginal.covariance)

    def fit(self, X0, X1):
        """Solve for the potentials.

        ``X0`` and ``X1`` are :class:`GridDensity` objects, Gaussian marginals,
        or samples (a Gaussian is fitted and discretized).
        """
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        points = self.points
        if np.isscalar(points):
            points = (int(points),) * lower.shape[0]
        grid = sg.SpatialGrid(tuple(lower), tuple(np.atleast_1d(self.upper)), tuple(points))
        if not self.epsilon > 0:
            raise ValidationError("the grid solver requires epsilon > 0")
        prior = _prior(self.drift, self.epsilon, grid.dimension)
        rho0 = self._density(X0, grid, "X0")
        rho1 = self._density(X1, grid, "X1")
        kern = sg.kernel(prior, grid, self.t_start, self.t_end)
        self.potentials_ = sg.fortet_solve(kern, rho0, rho1, tol=self.tol, max_iter=self.max_iter)
        self.grid_ = grid
        self.prior_ = prior
        self.n_iter_ = self.potentials_.iterations
        self.n_features_in_ = grid.dimension
        return self

    def marginal(self, t):
        """Bridge density at time ``t`` as a :class:`GridDensity`."""
        check_is_fitted(self, "potentials_")
        return sg.marginal_at(self.potentials_, self.prior_, self.grid_, t)

    def drift_field(self, t, kind="forward"):
        """Drift of the requested ``kind`` (forward, backward, current, osmotic) at ``t``."""
        check_is_fitted(self, "potentials_")
        args = (self.potentials_, self.prior_, self.grid_, t)
        if kind == "forward":
            return sg.forward_drift(*args)
        if kind == "backward":
            return sg.backward_drift(*args)
        current, osmotic = sg.symmetric_drifts(*args)
        if kind == "current":
            return current
        if kind == "osmotic":
            return osmotic
        raise ValidationError(f"unknown drift kind {kind!r}")

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bridgekit import GaussianBridge, GridSchrodingerBridge
from bridgekit.estimators import gaussian_from_samples
from bridgekit.exceptions import ValidationError
from bridgekit.gauss_markov import GaussianMarginal
from bridgekit.schrodinger_grid import GridDensity


@pytest.fixture
def samples(rng):
    x0 = rng.normal(size=(400, 2))
    x1 = rng.normal(size=(400, 2)) @ np.array([[1.5, 0.0], [0.4, 0.7]]) + 3.0
    return x0, x1


def test_params_and_clone():
    model = GaussianBridge(drift=-np.eye(2), epsilon=0.5, steps=200)
    params = model.get_params()
    assert params["epsilon"] == 0.5 and params["steps"] == 200
    copy = clone(model)
    assert copy.epsilon == 0.5 and copy is not model
    model.set_params(epsilon=2.0)
    assert model.epsilon == 2.0
    assert "GaussianBridge" in repr(model)


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        GaussianBridge().transform(np.zeros((3, 2)))


@pytest.mark.parametrize("epsilon", [0.0, 0.5, 2.0])
def test_transform_reaches_target_moments(samples, epsilon):
    x0, x1 = samples
    model = GaussianBridge(drift=-np.eye(2), epsilon=epsilon, steps=500).fit(x0, x1)
    target = gaussian_from_samples(x1)
    image = model.transform(x0)
    np.testing.assert_allclose(image.mean(axis=0), target.mean, atol=1e-6)
    np.testing.assert_allclose(np.cov(image, rowvar=False), target.covariance, atol=1e-6)
    assert model.n_features_in_ == 2
    assert model.flow_maps_.shape == (501, 2, 2)


def test_interpolation_tracks_bridge_moments(samples):
    x0, x1 = samples
    model = GaussianBridge(epsilon=1.0, steps=400).fit(x0, x1)
    for t in (0.25, 0.5):
        image = model.interpolate(x0, t)
        marginal = model.bridge_.marginal(t)
        np.testing.assert_allclose(image.mean(axis=0), marginal.mean, atol=1e-6)
        np.testing.assert_allclose(np.cov(image, rowvar=False), marginal.covariance, atol=1e-5)
    np.testing.assert_allclose(model.interpolate(x0, 0.0), x0, atol=1e-12)


def test_fit_accepts_marginals():
    rho0 = GaussianMarginal([0.0], [[1.0]])
    rho1 = GaussianMarginal([1.0], [[4.0]])
    model = GaussianBridge(epsilon=0.0, steps=100).fit(rho0, rho1)
    # N(0, 1) -> N(1, 4) without noise is the affine map x -> 1 + 2 x
    np.testing.assert_allclose(model.transform([[0.0], [1.0]]), [[1.0], [3.0]], atol=1e-8)


def test_sample_paths(samples):
    x0, x1 = samples
    model = GaussianBridge(epsilon=0.5, steps=100).fit(x0, x1)
    paths = model.sample_paths(20, seed=4)
    assert paths.shape == (20, 101, 2)
    np.testing.assert_array_equal(paths, model.sample_paths(20, seed=4))


def test_input_errors(samples):
    x0, x1 = samples
    with pytest.raises(ValidationError):
        GaussianBridge().fit(x0, x1[:, :1])
    with pytest.raises(ValidationError):
        GaussianBridge(drift=np.eye(3)).fit(x0, x1)
    with pytest.raises(ValueError):
        GaussianBridge().fit(x0[:1], x1)
    model = GaussianBridge(steps=50).fit(x0, x1)
    with pytest.raises(ValidationError):
        model.transform(np.zeros((2, 3)))


def test_grid_estimator_matches_gaussian_oracle():
    model = GridSchrodingerBridge(lower=-8.0, upper=9.0, points=600, epsilon=1.0)
    model.fit(GaussianMarginal([0.0], [[1.0]]), GaussianMarginal([1.0], [[1.0]]))
    assert model.n_iter_ >= 1
    reference = GaussianBridge(epsilon=1.0).fit(GaussianMarginal([0.0], [[1.0]]), GaussianMarginal([1.0], [[1.0]]))
    mid = model.marginal(0.5)
    gauss = reference.bridge_.marginal(0.5)
    exact = GridDensity.from_gaussian(model.grid_, gauss.mean, gauss.covariance)
    assert mid.l1_distance(exact) <= 1e-3
    forward = model.drift_field(0.5)
    backward = model.drift_field(0.5, kind="backward")
    current = model.drift_field(0.5, kind="current")
    osmotic = model.drift_field(0.5, kind="osmotic")
    assert [f.kind for f in (forward, backward, current, osmotic)] == list(forward.KINDS)
    inside = forward.mask & backward.mask
    np.testing.assert_allclose(
        (current.values + osmotic.values)[inside], forward.values[inside], atol=1e-10
    )
    np.testing.assert_allclose(
        (current.values - osmotic.values)[inside], backward.values[inside], atol=1e-10
    )
    with pytest.raises(ValidationError):
        model.drift_field(0.5, kind="sideways")


def test_grid_estimator_accepts_samples_and_densities(rng):
    model = GridSchrodingerBridge(lower=-8.0, upper=9.0, points=200, epsilon=1.0, tol=1e-6)
    model.fit(rng.normal(size=(2000, 1)), rng.normal(size=(2000, 1)) + 1.0)
    rho = GridDensity.from_gaussian(model.grid_, [0.0], [[1.0]])
    assert clone(model).set_params(points=200).fit(rho, rho).n_iter_ >= 1


def test_grid_estimator_errors():
    rho = GaussianMarginal([0.0], [[1.0]])
    with pytest.raises(ValidationError):
        GridSchrodingerBridge(-8.0, 8.0, 200, epsilon=0.0).fit(rho, rho)
    other = GridSchrodingerBridge(-8.0, 8.0, 100).fit(rho, rho)
    foreign = GridDensity.from_gaussian(other.grid_, [0.0], [[1.0]])
    with pytest.raises(ValidationError):
        GridSchrodingerBridge(-8.0, 8.0, 200).fit(foreign, rho)
    with pytest.raises(NotFittedError):
        GridSchrodingerBridge(-8.0, 8.0, 200).marginal(0.5)

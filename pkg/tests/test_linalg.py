import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridgekit._linalg import expm, hermite_midpoints, inv_sqrt_spd, simpson, sqrt_spd
from bridgekit.exceptions import NotPositiveSemidefiniteError, ValidationError

finite = st.floats(-4.0, 4.0, allow_nan=False)


@given(arrays(float, st.tuples(st.integers(1, 4)).map(lambda s: (s[0], s[0])), elements=finite))
def test_expm_matches_scipy(a):
    ref = scipy.linalg.expm(a)
    assert np.allclose(expm(a), ref, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(ref).max()))


def test_expm_scalar_decay():
    assert np.allclose(expm(-3.0 * np.eye(2)), np.exp(-3.0) * np.eye(2), rtol=1e-14)


def test_expm_large_norm_uses_squaring():
    a = np.array([[0.0, 40.0], [-40.0, 0.0]])
    assert np.allclose(expm(a), scipy.linalg.expm(a), atol=1e-11)


@pytest.mark.parametrize(
    "m, root",
    [
        (np.eye(3), np.eye(3)),
        (np.diag([4.0, 9.0]), np.diag([2.0, 3.0])),
    ],
)
def test_sqrt_spd_simple_cases(m, root):
    assert np.allclose(sqrt_spd(m), root, atol=1e-14)


def test_sqrt_spd_two_by_two_eigenstructure():
    m = np.array([[2.0, 1.0], [1.0, 2.0]])
    r = sqrt_spd(m)
    assert np.allclose(r @ r, m, atol=1e-14)
    assert np.allclose(np.linalg.eigvalsh(r), [1.0, np.sqrt(3.0)])


def test_sqrt_spd_clips_roundoff_negative_eigenvalue():
    m = np.diag([1.0, -1e-14])
    assert np.allclose(sqrt_spd(m), np.diag([1.0, 0.0]))


def test_sqrt_spd_rejects_indefinite():
    with pytest.raises(NotPositiveSemidefiniteError):
        sqrt_spd(np.diag([1.0, -1e-6]))


def test_sqrt_spd_rejects_asymmetric():
    with pytest.raises(ValidationError):
        sqrt_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(arrays(float, (3, 3), elements=st.floats(-2.0, 2.0)))
def test_sqrt_spd_squares_back(b):
    m = b @ b.T + 0.1 * np.eye(3)
    r = sqrt_spd(m)
    assert np.allclose(r, r.T)
    assert np.allclose(r @ r, m, atol=1e-10)
    assert np.allclose(inv_sqrt_spd(m) @ r, np.eye(3), atol=1e-9)


def test_simpson_is_exact_on_cubics():
    x = np.linspace(0.0, 2.0, 11)
    assert simpson(x**3 - x, x[1] - x[0]) == pytest.approx(4.0 - 2.0, abs=1e-13)


def test_simpson_two_points_is_trapezoid():
    assert simpson(np.array([1.0, 3.0]), 0.5) == 1.0


def test_hermite_midpoints_exact_on_cubic():
    t = np.linspace(0.0, 1.0, 6)
    f = lambda s: 2 * s**3 - s + 1
    df = lambda s: 6 * s**2 - 1
    mids = hermite_midpoints(f(t), df(t[:-1]), df(t[1:]), t[1] - t[0])
    assert np.allclose(mids, f(0.5 * (t[:-1] + t[1:])), atol=1e-14)

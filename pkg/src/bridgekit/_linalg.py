"""Dense linear-algebra kernels: matrix exponential, SPD square root, quadrature."""

import numpy as np
from scipy import integrate

from ._validation import as_square, symmetry_defect
from .exceptions import NotPositiveSemidefiniteError, ValidationError

# Diagonal [6/6] Pade coefficients c_k = (12-k)! 6! / (12! k! (6-k)!)
_PADE6 = np.array([1.0, 1 / 2, 5 / 44, 1 / 66, 1 / 792, 1 / 15840, 1 / 665280])
# ||X||_1 bound below which the [6/6] approximant is accurate to double precision
_PADE6_THETA = 0.5

EIG_CLIP_RTOL = 1e-12


def expm(a):
    """Matrix exponential by scaling and squaring with a [6/6] Pade approximant."""
    a = as_square(a, "matrix")
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    squarings = 0
    if norm > _PADE6_THETA:
        squarings = int(np.ceil(np.log2(norm / _PADE6_THETA)))
    x = a / 2.0**squarings
    ident = np.eye(n)
    powers = [ident, x]
    for _ in range(5):
        powers.append(powers[-1] @ x)
    even = sum(_PADE6[k] * powers[k] for k in range(0, 7, 2))
    odd = sum(_PADE6[k] * powers[k] for k in range(1, 7, 2))
    result = np.linalg.solve(even - odd, even + odd)
    for _ in range(squarings):
        result = result @ result
    return result


def sqrt_spd(m, rtol=1e-9):
    """Principal square root of a symmetric positive semidefinite matrix.

    Eigenvalues in ``[-1e-12 * lambda_max, 0)`` are treated as roundoff and
    clipped to zero; anything more negative raises
    :class:`NotPositiveSemidefiniteError`.
    """
    m = as_square(m, "matrix")
    if symmetry_defect(m) > rtol:
        raise ValidationError(f"matrix is not symmetric (relative defect {symmetry_defect(m):.3e})")
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    lam_max = max(abs(w[-1]), abs(w[0]))
    if w[0] < -EIG_CLIP_RTOL * lam_max:
        raise NotPositiveSemidefiniteError(
            f"matrix has eigenvalue {w[0]:.3e} < -{EIG_CLIP_RTOL:g} * {lam_max:.3e}"
        )
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def inv_sqrt_spd(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w[0] <= 0.0:
        raise NotPositiveSemidefiniteError(f"matrix is singular or indefinite (eigenvalue {w[0]:.3e})")
    root = (v / np.sqrt(w)) @ v.T
    return 0.5 * (root + root.T)


def symmetrize(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def simpson(values, dx):
    """Composite Simpson rule along axis 0 of uniformly spaced samples."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 2:
        return 0.5 * dx * (values[0] + values[1])
    return integrate.simpson(values, dx=dx, axis=0)


def hermite_midpoints(values, slopes_left, slopes_right, dt):
    """Cubic Hermite values at interval midpoints.

    ``slopes_left[k]`` and ``slopes_right[k]`` are the derivatives at the two
    ends of interval ``k`` (they differ across a drift breakpoint).
    """
    return 0.5 * (values[:-1] + values[1:]) + dt / 8.0 * (slopes_left - slopes_right)

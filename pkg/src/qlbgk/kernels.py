"""Scalar relaxation kernels and damped free-evolution maps.

All three scalar kernels are functions of the ratio x = tau/eps^2 and are
evaluated with cancellation-safe series below ``_SERIES_CUTOFF``; for large x
the exponentials underflow/saturate benignly (only ``a_weighted`` needs an
explicit overflow guard because its closed form contains e^{+x}).
"""

from __future__ import annotations

import numpy as np

from .operators import DensityOperator, crank_nicolson_propagator, propagate_exact

# Below the cutoff the closed forms lose up to ~12/x^2 * eps relative accuracy
# to cancellation; the series are exact to machine precision there.
_SERIES_CUTOFF = 0.5
_A_SERIES_CUTOFF = 0.05
_OVERFLOW_X = 700.0


def _kappa_of_x(x: float) -> float:
    """kappa as a function of x = tau/eps^2: 1 - (1+x) e^{-x}."""
    if x < 0.0:
        raise ValueError(f"tau must be nonnegative, got x = {x}")
    if x < _SERIES_CUTOFF:
        # sum_{k>=2} (-1)^k (k-1)/k! x^k, truncated when terms stop mattering
        total = 0.0
        term = x * x / 2.0  # k = 2
        k = 2
        while abs(term) > 1e-20 * max(abs(total), 1e-300):
            total += term
            k += 1
            term *= -x * (k - 1) / (k * (k - 2))
            if k > 60:
                break
        return total
    if x > _OVERFLOW_X:
        return 1.0
    return -np.expm1(-x) - x * np.exp(-x)


def kappa(eps: float, tau: float) -> float:
    """Relaxation weight 1 - e^{-tau/eps^2} - (tau/eps^2) e^{-tau/eps^2}.

    Monotone increasing in tau with values in [0, 1).
    """
    return _kappa_of_x(tau / (eps * eps))


def xi(eps: float, dt: float) -> float:
    """Integral of kappa(eps, .) from 0 to dt, in closed form.

    Equals dt*(1 + e^{-x}) - 2 eps^2 (1 - e^{-x}) with x = dt/eps^2; evaluated
    by series for small x where that expression cancels.  Value in (0, dt).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = dt / (eps * eps)
    if x < _SERIES_CUTOFF:
        # dt * sum_{k>=2} (-1)^k (k-1)/(k+1)! x^k
        total = 0.0
        term = x * x / 6.0  # k = 2
        k = 2
        while abs(term) > 1e-20 * max(abs(total), 1e-300):
            total += term
            k += 1
            term *= -x * (k - 1) / ((k + 1) * (k - 2))
            if k > 60:
                break
        return dt * total
    emx = np.exp(-x) if x <= _OVERFLOW_X else 0.0
    return dt * (1.0 + emx) - 2.0 * eps * eps * (1.0 - emx)


def a_weighted(eps: float, dt: float) -> float:
    """Mean of r under the weight e^{-r/eps^2} on [0, dt].

    Closed form eps^2 - dt/(e^{dt/eps^2} - 1); the first moment of the weight
    about the returned point vanishes.  Value in (0, dt).
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    e2 = eps * eps
    x = dt / e2
    if x < _A_SERIES_CUTOFF:
        # eps^2 (x/2 - x^2/12 + x^4/720 - x^6/30240), Bernoulli tail
        x2 = x * x
        return e2 * (
            x / 2.0 - x2 / 12.0 + x2 * x2 / 720.0 - x2 * x2 * x2 / 30240.0
        )
    if x > _OVERFLOW_X:
        return e2
    return e2 - dt / np.expm1(x)


def damped_free_map(sigma, eps: float, tau: float, ham) -> DensityOperator:
    """S_{eps,tau}: e^{-tau} e^{-i eps tau H} sigma e^{i eps tau H}."""
    rotated = propagate_exact(sigma, ham, eps * tau)
    damping = np.exp(-tau) if tau <= _OVERFLOW_X else 0.0
    return DensityOperator(damping * rotated.matrix, ham.grid)


def discrete_damped_free_map(
    sigma, eps: float, dt: float, ham, substeps: int = 1
) -> DensityOperator:
    """Discrete counterpart of S_{eps, dt/eps^2} with a Crank-Nicolson unitary.

    The unitary approximates e^{-i dt H / eps}; the damping e^{-dt/eps^2} is
    applied exactly.
    """
    u = crank_nicolson_propagator(ham, dt / eps, substeps)
    mat = np.asarray(sigma.matrix if isinstance(sigma, DensityOperator) else sigma)
    x = dt / (eps * eps)
    damping = np.exp(-x) if x <= _OVERFLOW_X else 0.0
    out = damping * (u @ mat @ u.conj().T)
    grid = sigma.grid if isinstance(sigma, DensityOperator) else ham.grid
    return DensityOperator(out, grid)

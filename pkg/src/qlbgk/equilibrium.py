"""Quantum free energy, quantum Maxwellians and the chemical potential.

The equilibrium associated with a density n is theta[n] = exp(-(H + A)/T_e)
with the chemical potential A = A[n] chosen so that the local density of
theta[n] equals n.  A[n] is computed by minimizing the strictly convex dual
functional

    G(A) = h sum n A + T_e Tr exp(-(H + A)/T_e),

whose gradient is h n - diag(theta[A]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _minimize
from .errors import InvalidInputError, InvalidStateError, NumericalFailureError
from .grid import GridSpec, HamiltonianSet
from .operators import DensityOperator

_ENTROPY_FLOOR = 1e-300
_EXP_GUARD = 700.0


@dataclass(frozen=True)
class QuantumMaxwellian:
    """Full-rank equilibrium exp(-(H + A)/T_e) with its defining potential."""

    operator: DensityOperator
    potential: np.ndarray
    temperature: float
    # eigendata of H + diag(potential), kept for cheap reuse by the solvers
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def density(self) -> np.ndarray:
        return np.diag(self.operator.matrix).real / self.operator.grid.spacing


def maxwellian_from_potential(
    a: np.ndarray, ham: HamiltonianSet, t_e: float
) -> QuantumMaxwellian:
    """Assemble exp(-(H + diag(A))/T_e) by functional calculus."""
    a = np.asarray(a, dtype=float)
    if a.shape != (ham.n_points,):
        raise InvalidInputError(
            f"potential has shape {a.shape}, expected ({ham.n_points},)"
        )
    nu, w = np.linalg.eigh(ham.h + np.diag(a))
    return _assemble(nu, w, ham.grid, a, t_e)


def _assemble(nu, w, grid: GridSpec, a, t_e: float) -> QuantumMaxwellian:
    arg = -nu / t_e
    if float(np.max(arg)) > _EXP_GUARD:
        worst = float(nu[int(np.argmax(arg))])
        raise NumericalFailureError(
            f"equilibrium weights overflow: eigenvalue {worst:.6g} with T_e={t_e:.6g}"
        )
    weights = np.exp(arg)
    theta = (w * weights) @ w.T
    theta = 0.5 * (theta + theta.T)
    op = DensityOperator(theta, grid)
    return QuantumMaxwellian(
        operator=op,
        potential=np.asarray(a, dtype=float),
        temperature=t_e,
        eigenvalues=nu,
        eigenvectors=w,
    )


def free_energy(
    sigma: DensityOperator,
    ham: HamiltonianSet,
    t_e: float,
    *,
    negative_tol: float = 1e-10,
) -> float:
    """T_e Tr(sigma log sigma - sigma) + Tr(H sigma) for a PSD state.

    Zero eigenvalues contribute 0 via the 0 log 0 = 0 convention; eigenvalues
    below -negative_tol * trace raise an invalid-state error.  Pass
    negative_tol=inf to clip silently (diagnostics use).
    """
    sigma.require_hermitian()
    lam = sigma.decomposition.eigenvalues
    tr = float(np.sum(lam))
    floor = -negative_tol * max(abs(tr), 1e-300)
    if np.isfinite(negative_tol) and float(lam[-1]) < floor:
        raise InvalidStateError(
            f"state has negative eigenvalue {float(lam[-1]):.3e} (trace {tr:.3e})"
        )
    lam = np.clip(lam, _ENTROPY_FLOOR, None)
    entropy = float(np.sum(lam * np.log(lam) - lam))
    energy = float(np.trace(ham.h @ sigma.matrix).real)
    return t_e * entropy + energy


def _initial_potential(
    n_target: np.ndarray, ham: HamiltonianSet, t_e: float
) -> np.ndarray:
    """H = 0 closed form -T_e log(h n), shifted to match the total mass."""
    h = ham.grid.spacing
    a0 = -t_e * np.log(h * n_target)
    mass_target = h * float(np.sum(n_target))
    nu = np.linalg.eigvalsh(ham.h + np.diag(a0))
    arg = -nu / t_e
    top = float(np.max(arg))
    # log-sum-exp so the shift works even when a0 + spectrum is extreme
    log_mass = top + np.log(np.sum(np.exp(arg - top)))
    return a0 + t_e * (log_mass - np.log(mass_target))


def chemical_potential(
    n_target: np.ndarray,
    ham: HamiltonianSet,
    t_e: float,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    strategy: str = "newton",
    initial: np.ndarray | None = None,
):
    """Solve density(theta[A]) = n_target for the chemical potential A.

    Returns (a, maxwellian, iterations).  Convergence criterion is
    || density(theta[A]) - n_target ||_L1 <= tol * || n_target ||_L1.
    """
    n_target = np.asarray(n_target, dtype=float)
    if n_target.shape != (ham.n_points,):
        raise InvalidInputError(
            f"target density has shape {n_target.shape}, expected ({ham.n_points},)"
        )
    if not np.all(n_target > 0.0):
        raise InvalidInputError("target density must be strictly positive")
    if not np.all(np.isfinite(n_target)):
        raise InvalidInputError("target density must be finite")

    problem = _minimize.JProblem(ham=ham, t_e=t_e, linear=n_target)
    a0 = _initial_potential(n_target, ham, t_e) if initial is None else np.asarray(initial, dtype=float)
    tol_abs = tol * ham.grid.l1_norm(n_target)
    result = _minimize.minimize(
        problem, a0, tol=tol_abs, max_iter=max_iter, strategy=strategy
    )
    maxw = _assemble(
        result.eigenvalues, result.eigenvectors, ham.grid, result.a, t_e
    )
    return result.a, maxw, result.iterations


def equilibrium(
    n_target: np.ndarray, ham: HamiltonianSet, t_e: float, **opts
) -> QuantumMaxwellian:
    """The map n -> theta[n]: chemical-potential solve plus assembly."""
    _, maxw, _ = chemical_potential(n_target, ham, t_e, **opts)
    return maxw


def dual_value(n_target: np.ndarray, ham: HamiltonianSet, t_e: float, a: np.ndarray) -> float:
    """G(A) = h sum(n_target A) + T_e Tr exp(-(H+A)/T_e)."""
    problem = _minimize.JProblem(ham=ham, t_e=t_e, linear=np.asarray(n_target, dtype=float))
    return _minimize.value(problem, np.asarray(a, dtype=float))


def dual_gradient(n_target: np.ndarray, ham: HamiltonianSet, t_e: float, a: np.ndarray) -> np.ndarray:
    """Gradient of G: h n_target - diag(exp(-(H+A)/T_e))."""
    problem = _minimize.JProblem(ham=ham, t_e=t_e, linear=np.asarray(n_target, dtype=float))
    grad, *_ = _minimize.gradient_parts(problem, np.asarray(a, dtype=float))
    return grad

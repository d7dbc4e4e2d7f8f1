"""Density operators, observables, norms and free propagators.

Kernel scaling convention: a density operator with integral kernel k(x, y)
is stored as the matrix M with M[i, j] = h * k(x_i, x_j), so that
trace(M) = integral of the local density and density = diag(M)/h.  The
convention makes observables independent of the grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidStateError, NumericalFailureError
from .grid import DerivativeOperator, GridSpec, HamiltonianSet

_HERMITICITY_RTOL = 1e-12


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (descending) and orthonormal eigenvectors of an operator."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class Observables:
    """Local density, current and divergence of current of one operator."""

    density: np.ndarray
    current: np.ndarray
    div_current: np.ndarray


class DensityOperator:
    """Hermitian matrix with kernel scaling plus a lazily cached eigensystem.

    The matrix is not copied and must not be mutated after construction; the
    dtype (real or complex) is preserved so that structurally real states keep
    exactly zero current.
    """

    __slots__ = ("matrix", "grid", "__dict__")

    def __init__(self, matrix: np.ndarray, grid: GridSpec):
        matrix = np.asarray(matrix)
        if matrix.shape != (grid.n_points, grid.n_points):
            raise InvalidStateError(
                f"operator shape {matrix.shape} does not match grid "
                f"({grid.n_points} points)"
            )
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "grid", grid)

    def __setattr__(self, name, value):  # immutable except for the cache dict
        raise AttributeError("DensityOperator is immutable")

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    def hermiticity_residual(self) -> float:
        """Max-norm of M - M^dagger."""
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def require_hermitian(self, rtol: float = _HERMITICITY_RTOL):
        scale = float(np.max(np.abs(self.matrix))) or 1.0
        res = self.hermiticity_residual()
        if res > rtol * scale:
            raise InvalidStateError(
                f"operator is not Hermitian: residual {res:.3e} > {rtol:.0e} * {scale:.3e}"
            )

    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def symmetrized(self) -> "DensityOperator":
        return DensityOperator(0.5 * (self.matrix + self.matrix.conj().T), self.grid)

    @cached_property
    def decomposition(self) -> SpectralDecomposition:
        """Eigensystem of the Hermitian part, eigenvalues descending."""
        w, v = np.linalg.eigh(0.5 * (self.matrix + self.matrix.conj().T))
        return SpectralDecomposition(
            eigenvalues=w[::-1].copy(), eigenvectors=v[:, ::-1].copy()
        )

    def min_eigenvalue(self) -> float:
        return float(self.decomposition.eigenvalues[-1])


def _as_matrix(op) -> np.ndarray:
    return op.matrix if isinstance(op, DensityOperator) else np.asarray(op)


def density(rho: DensityOperator) -> np.ndarray:
    """Local density n_i = Re(M_ii)/h; h*sum(n) equals trace(M)."""
    rho.require_hermitian()
    return np.diag(rho.matrix).real / rho.grid.spacing


def current(rho: DensityOperator, deriv: DerivativeOperator) -> np.ndarray:
    """Local current j_i = (2/h) Im((D M)_ii).

    Matrix form of 2 Im sum_p lambda_p psi_p^*(x_i) (D psi_p)(x_i) / h.
    """
    rho.require_hermitian()
    dm = deriv.matrix @ rho.matrix
    return 2.0 * np.imag(np.diag(dm)) / rho.grid.spacing


def div_current(rho: DensityOperator, deriv: DerivativeOperator) -> np.ndarray:
    """Divergence of the local current, D applied to current(rho)."""
    return deriv.matrix @ current(rho, deriv)


def observables(rho: DensityOperator, deriv: DerivativeOperator) -> Observables:
    j = current(rho, deriv)
    return Observables(
        density=density(rho), current=j, div_current=deriv.matrix @ j
    )


def commutator(a, b) -> np.ndarray:
    """AB - BA; anti-Hermitian whenever A and B are Hermitian."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape != b.shape:
        raise InvalidStateError(f"shape mismatch {a.shape} vs {b.shape}")
    return a @ b - b @ a


def _hermitian_eigh(sigma) -> tuple[np.ndarray, np.ndarray]:
    mat = _as_matrix(sigma)
    try:
        return np.linalg.eigh(0.5 * (mat + mat.conj().T))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK breakdown
        raise NumericalFailureError(f"eigendecomposition failed: {exc}") from exc


def trace_norm(sigma) -> float:
    """Sum of absolute eigenvalues of a Hermitian operator."""
    w, _ = _hermitian_eigh(sigma)
    return float(np.sum(np.abs(w)))


def e2_norm(sigma, h0: np.ndarray) -> float:
    """Energy-weighted trace norm: sum |lambda_p| (1 + ||h0 psi_p||^2)."""
    w, v = _hermitian_eigh(sigma)
    h0v = np.asarray(h0) @ v
    weights = 1.0 + np.sum(np.abs(h0v) ** 2, axis=0)
    return float(np.sum(np.abs(w) * weights))


def propagate_exact(sigma, ham: HamiltonianSet, t: float) -> DensityOperator:
    """Unitary conjugation e^{-itH} sigma e^{itH} by functional calculus.

    Uses the eigendecomposition cached on ``ham``; trace and eigenvalues of
    sigma are preserved.
    """
    grid = sigma.grid if isinstance(sigma, DensityOperator) else ham.grid
    mat = _as_matrix(sigma)
    if t == 0.0:
        return DensityOperator(mat, grid)
    v = ham.eigenvectors
    phases = np.exp(-1j * t * ham.eigenvalues)
    core = v.conj().T @ mat @ v
    out = (v * phases) @ core @ (v * phases).conj().T
    return DensityOperator(out, grid)


def crank_nicolson_propagator(
    ham: HamiltonianSet, tau: float, substeps: int = 1
) -> np.ndarray:
    """Cayley-form approximation of e^{-i tau H}.

    U = [(I + i tau' H/2)^{-1} (I - i tau' H/2)]^substeps with
    tau' = tau/substeps, applied through the cached eigenbasis of H so the
    result is unitary to machine precision for any tau.  Second order
    accurate in tau' against the exact propagator.
    """
    if substeps < 1 or int(substeps) != substeps:
        raise NumericalFailureError(f"substeps must be a positive integer, got {substeps}")
    n = ham.n_points
    if tau == 0.0:
        return np.eye(n, dtype=complex)
    half = 0.5 * (tau / substeps) * ham.eigenvalues
    cayley = ((1.0 - 1j * half) / (1.0 + 1j * half)) ** substeps
    v = ham.eigenvectors
    return (v * cayley) @ v.conj().T

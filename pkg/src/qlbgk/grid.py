"""Periodic 1-D grid, differentiation operators and Hamiltonians.

The spatial setup is deliberately dense: all operators are built as real
matrices so that structural identities (antisymmetry of the derivative,
symmetry of the Hamiltonian, zero current of real states) hold to machine
precision rather than only in the continuum limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigurationError

SPECTRAL = "spectral"
CENTRAL = "central-difference"
_METHODS = (SPECTRAL, CENTRAL)


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid x_i = i*h on [0, L) with h = L/n_points."""

    n_points: int
    length: float

    @property
    def spacing(self) -> float:
        return self.length / self.n_points

    @property
    def nodes(self) -> np.ndarray:
        return self.spacing * np.arange(self.n_points)

    def l1_norm(self, values: np.ndarray) -> float:
        """Discrete L1 norm h*sum|f_i| of a grid function."""
        return float(self.spacing * np.sum(np.abs(values)))

    def integrate(self, values: np.ndarray) -> float:
        """Discrete integral h*sum f_i of a grid function."""
        return float(self.spacing * np.sum(values))


@dataclass(frozen=True)
class DerivativeOperator:
    """Real antisymmetric discretization of d/dx on a periodic grid."""

    matrix: np.ndarray
    method: str
    grid: GridSpec

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


@dataclass(frozen=True)
class HamiltonianSet:
    """H0 = -Laplacian and H = H0 + V as real symmetric matrices.

    The eigendecomposition of ``h`` is computed eagerly at construction and
    cached; propagators and equilibria reuse it for the whole run.
    """

    h0: np.ndarray
    potential: np.ndarray
    h: np.ndarray
    grid: GridSpec
    eigenvalues: np.ndarray = field(init=False, repr=False)
    eigenvectors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w, v = np.linalg.eigh(self.h)
        object.__setattr__(self, "eigenvalues", w)
        object.__setattr__(self, "eigenvectors", v)

    @property
    def n_points(self) -> int:
        return self.grid.n_points


def build_grid(n_points: int, length: float) -> GridSpec:
    """Build a uniform periodic grid with n_points >= 2 nodes."""
    if int(n_points) != n_points or n_points < 2:
        raise InvalidConfigurationError(
            f"n_points must be an integer >= 2, got {n_points!r}"
        )
    if not (length > 0.0) or not np.isfinite(length):
        raise InvalidConfigurationError(f"length must be positive, got {length!r}")
    return GridSpec(n_points=int(n_points), length=float(length))


def _wavenumbers(grid: GridSpec) -> np.ndarray:
    """Angular wavenumbers in FFT ordering; for even N index N/2 holds -N/2."""
    return 2.0 * np.pi * np.fft.fftfreq(grid.n_points, d=grid.spacing)


def _fourier_matrix(grid: GridSpec, multipliers: np.ndarray) -> np.ndarray:
    """Real part of IFFT diag(multipliers) FFT applied to the identity."""
    eye = np.eye(grid.n_points)
    out = np.fft.ifft(multipliers[:, None] * np.fft.fft(eye, axis=0), axis=0)
    return np.ascontiguousarray(out.real)


def build_derivative(grid: GridSpec, method: str = SPECTRAL) -> DerivativeOperator:
    """Build d/dx with the requested method.

    The spectral operator differentiates all resolvable trigonometric modes
    exactly; the Nyquist multiplier is zero so the matrix is real.  The result
    is explicitly antisymmetrized to remove FFT roundoff.
    """
    if method not in _METHODS:
        raise InvalidConfigurationError(f"unknown derivative method {method!r}")
    n, h = grid.n_points, grid.spacing
    if method == SPECTRAL:
        k = _wavenumbers(grid)
        mult = 1j * k
        if n % 2 == 0:
            mult[n // 2] = 0.0
        d = _fourier_matrix(grid, mult)
        d = 0.5 * (d - d.T)
    else:
        # accumulate so the n == 2 case (where the +1 and -1 neighbours
        # coincide) correctly cancels to zero
        d = np.zeros((n, n))
        idx = np.arange(n)
        d[idx, (idx + 1) % n] += 1.0 / (2.0 * h)
        d[idx, (idx - 1) % n] -= 1.0 / (2.0 * h)
    return DerivativeOperator(matrix=d, method=method, grid=grid)


def build_hamiltonians(
    grid: GridSpec, potential: np.ndarray, method: str = SPECTRAL
) -> HamiltonianSet:
    """Build H0 = -Laplacian (spectral or 3-point) and H = H0 + diag(V)."""
    if method not in _METHODS:
        raise InvalidConfigurationError(f"unknown Laplacian method {method!r}")
    v = np.asarray(potential, dtype=float)
    if v.shape != (grid.n_points,):
        raise InvalidConfigurationError(
            f"potential has shape {v.shape}, expected ({grid.n_points},)"
        )
    if not np.all(np.isfinite(v)):
        raise InvalidConfigurationError("potential must be finite")
    n, h = grid.n_points, grid.spacing
    if method == SPECTRAL:
        k = _wavenumbers(grid)
        h0 = _fourier_matrix(grid, k**2 + 0j)
        h0 = 0.5 * (h0 + h0.T)
    else:
        h0 = np.zeros((n, n))
        idx = np.arange(n)
        h0[idx, idx] = 2.0 / h**2
        h0[idx, (idx + 1) % n] -= 1.0 / h**2
        h0[idx, (idx - 1) % n] -= 1.0 / h**2
    ham = h0 + np.diag(v)
    return HamiltonianSet(h0=h0, potential=v, h=ham, grid=grid)


def zero_hamiltonians(grid: GridSpec) -> HamiltonianSet:
    """Degenerate H = H0 = 0 set, useful for scalar/relaxation-only checks."""
    n = grid.n_points
    z = np.zeros((n, n))
    return HamiltonianSet(h0=z, potential=np.zeros(n), h=z.copy(), grid=grid)

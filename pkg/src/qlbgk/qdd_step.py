"""One implicit step of the modified quantum drift-diffusion equation.

The step advances the density under

    n_next - n_prev + 2 xi D(n_prev * D A_next) = source

by minimizing the strictly convex functional

    J(A) = xi h sum n_prev (DA)^2 + h sum (n_prev + source) A
           + T_e Tr exp(-(H + A)/T_e),

whose Euler-Lagrange equation is exactly the balance law above with
n_next = density(exp(-(H + A)/T_e)).  The limit xi = dt, source = 0 is the
implicit discretization of the quantum drift-diffusion equation.

Transport coefficient: with H0 = -Laplacian and the current convention
j = 2 Im(psi* grad psi), the equilibrium drift identity is
j[i[H, theta]] = -2 n grad(A) -- exact here because [H, theta] =
-[diag(A), theta] -- so the drift term of the density balance law carries
twice the kernel weight xi.  (In the -Laplacian/2 convention the constant
is 1.)  DRIFT_FACTOR records this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _minimize
from .equilibrium import QuantumMaxwellian, _assemble, _initial_potential
from .errors import InvalidInputError
from .grid import DerivativeOperator, GridSpec, HamiltonianSet

_SOURCE_MEAN_RTOL = 1e-12

# factor between the drift current j[i[H, theta]] and -n grad(A) in the
# H0 = -Laplacian, j = 2 Im convention (see module docstring)
DRIFT_FACTOR = 2.0


@dataclass(frozen=True)
class QddStepInput:
    """Data of one implicit step; source must be (discretely) mean-free."""

    n_prev: np.ndarray
    source: np.ndarray
    xi: float
    ham: HamiltonianSet
    t_e: float
    deriv: DerivativeOperator

    @property
    def grid(self) -> GridSpec:
        return self.ham.grid

    def validate(self):
        n = self.ham.n_points
        if self.n_prev.shape != (n,) or self.source.shape != (n,):
            raise InvalidInputError("n_prev and source must match the grid size")
        if not np.all(self.n_prev > 0.0):
            raise InvalidInputError("n_prev must be strictly positive")
        if not (self.xi > 0.0):
            raise InvalidInputError(f"xi must be positive, got {self.xi}")
        mean = abs(self.grid.integrate(self.source))
        scale = self.grid.l1_norm(self.source)
        if mean > _SOURCE_MEAN_RTOL * scale + 1e-300:
            raise InvalidInputError(
                f"source is not mean-free: |integral| = {mean:.3e}, L1 = {scale:.3e}"
            )


@dataclass(frozen=True)
class QddStepResult:
    a_next: np.ndarray
    n_next: np.ndarray
    theta_next: QuantumMaxwellian
    residual: float  # L1 norm of the Euler-Lagrange residual
    iterations: int


@dataclass(frozen=True)
class QddSolveOptions:
    tol: float = 1e-10  # absolute L1 residual
    max_iter: int = 500
    strategy: str = "auto"
    newton_switch: float = 1e-3
    initial_a: np.ndarray | None = field(default=None, compare=False)


def _problem(step: QddStepInput) -> _minimize.JProblem:
    return _minimize.JProblem(
        ham=step.ham,
        t_e=step.t_e,
        linear=step.n_prev + step.source,
        xi=DRIFT_FACTOR * step.xi,
        n_transport=step.n_prev,
        d_matrix=step.deriv.matrix,
    )


def evaluate_j(a: np.ndarray, step: QddStepInput) -> float:
    """J(A); reduces to the equilibrium dual functional when xi -> 0."""
    return _minimize.value(_problem(step), np.asarray(a, dtype=float))


def gradient_j(a: np.ndarray, step: QddStepInput) -> np.ndarray:
    """Gradient of J; zero exactly at the implicit-step solution."""
    grad, *_ = _minimize.gradient_parts(_problem(step), np.asarray(a, dtype=float))
    return grad


def solve_step(step: QddStepInput, opts: QddSolveOptions = QddSolveOptions()) -> QddStepResult:
    """Minimize J and return the advanced density and equilibrium.

    The returned residual is || n_next - n_prev + xi D(n_prev * DA) - source ||
    in the discrete L1 norm, which coincides with the L1 norm of grad J.
    """
    step.validate()
    if opts.initial_a is not None:
        a0 = np.asarray(opts.initial_a, dtype=float)
    else:
        a0 = _initial_potential(step.n_prev, step.ham, step.t_e)
    result = _minimize.minimize(
        _problem(step),
        a0,
        tol=opts.tol,
        max_iter=opts.max_iter,
        strategy=opts.strategy,
        newton_switch=opts.newton_switch,
    )
    maxw = _assemble(
        result.eigenvalues, result.eigenvectors, step.grid, result.a, step.t_e
    )
    n_next = result.theta_diag / step.grid.spacing
    return QddStepResult(
        a_next=result.a,
        n_next=n_next,
        theta_next=maxw,
        residual=result.residual,
        iterations=result.iterations,
    )

"""Shared minimizer for the convex chemical-potential functionals.

Both the equilibrium dual functional and the implicit-step functional have
the form

    F(A) = (xi/2) h sum n (DA)^2  +  h sum c A  +  T_e Tr exp(-(H + A)/T_e)

with xi = 0 recovering the pure equilibrium problem.  F is smooth and
strictly convex; its gradient in component i is

    -xi h (D (n * DA))_i + h c_i - exp(-(H + diag A)/T_e)_ii

so the L1 norm of the gradient equals the L1 density residual of the
Euler-Lagrange equation.  The Hessian of the trace term is applied with the
divided-difference (Loewner) formula in the eigenbasis of H + diag A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergenceError, NumericalFailureError
from .grid import HamiltonianSet

_EXP_GUARD = 700.0
_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class JProblem:
    """Data of one functional F; xi = 0 disables the transport term."""

    ham: HamiltonianSet
    t_e: float
    linear: np.ndarray  # coefficient c of the h*sum(c A) term
    xi: float = 0.0
    n_transport: np.ndarray | None = None  # density weighting (DA)^2
    d_matrix: np.ndarray | None = None

    @property
    def h(self) -> float:
        return self.ham.grid.spacing


@dataclass
class MinimizeResult:
    a: np.ndarray
    theta_diag: np.ndarray
    eigenvalues: np.ndarray  # of H + diag(a)
    eigenvectors: np.ndarray
    residual: float  # L1 norm of the gradient
    iterations: int


def _exp_weights(nu: np.ndarray, t_e: float) -> np.ndarray:
    arg = -nu / t_e
    top = float(np.max(arg))
    if top > _EXP_GUARD:
        worst = float(nu[int(np.argmax(arg))])
        raise NumericalFailureError(
            f"exp(-(H+A)/T_e) overflows: eigenvalue {worst:.6g} with T_e={t_e:.6g}"
        )
    return np.exp(arg)


def value(problem: JProblem, a: np.ndarray) -> float:
    """F(A); raises NumericalFailureError on overflow of the trace term."""
    nu = np.linalg.eigvalsh(problem.ham.h + np.diag(a))
    trace_term = problem.t_e * float(np.sum(_exp_weights(nu, problem.t_e)))
    h = problem.h
    out = h * float(np.dot(problem.linear, a)) + trace_term
    if problem.xi != 0.0:
        da = problem.d_matrix @ a
        out += 0.5 * problem.xi * h * float(np.dot(problem.n_transport, da * da))
    return out


def _eigensystem(problem: JProblem, a: np.ndarray):
    nu, w = np.linalg.eigh(problem.ham.h + np.diag(a))
    weights = _exp_weights(nu, problem.t_e)
    theta_diag = np.einsum("ip,p,ip->i", w, weights, w)
    return nu, w, weights, theta_diag


def gradient_parts(problem: JProblem, a: np.ndarray):
    """Gradient of F plus the eigendata of H + diag(A) used to form it."""
    nu, w, weights, theta_diag = _eigensystem(problem, a)
    grad = problem.h * problem.linear - theta_diag
    if problem.xi != 0.0:
        da = problem.d_matrix @ a
        grad -= problem.xi * problem.h * (
            problem.d_matrix @ (problem.n_transport * da)
        )
    return grad, nu, w, weights, theta_diag


def _loewner_kernel(nu: np.ndarray, weights: np.ndarray, t_e: float) -> np.ndarray:
    """K_pq = (w_q - w_p)/(nu_p - nu_q) >= 0, with the stable confluent limit."""
    dn = nu[:, None] - nu[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        k = (weights[None, :] - weights[:, None]) / dn
    u = dn / (2.0 * t_e)
    near = np.abs(u) < 1e-6
    if np.any(near):
        mid = np.exp(-(nu[:, None] + nu[None, :]) / (2.0 * t_e)) / t_e
        k = np.where(near, mid * (1.0 + u * u / 6.0), k)
    return k


def hessian(problem: JProblem, a: np.ndarray, nu, w, weights) -> np.ndarray:
    """Dense Hessian of F at A (positive definite)."""
    k = _loewner_kernel(nu, weights, problem.t_e)
    pair = np.einsum("iq,jq->ijq", w, w)
    tmp = pair @ k.T  # sum_q pair[i,j,q] K[p,q]
    hess = np.einsum("ijp,ip,jp->ij", tmp, w, w)
    if problem.xi != 0.0:
        d = problem.d_matrix
        hess = hess + problem.xi * problem.h * (
            d.T @ (problem.n_transport[:, None] * d)
        )
    return hess


def _armijo(problem, a, f0, grad, direction, slope, step0):
    """Backtracking line search; returns (new_a, new_f, step) or None."""
    step = step0
    for _ in range(_MAX_BACKTRACKS):
        trial = a + step * direction
        try:
            f_trial = value(problem, trial)
        except NumericalFailureError:
            f_trial = np.inf
        if f_trial <= f0 + _ARMIJO_C1 * step * slope:
            return trial, f_trial, step
        step *= 0.5
    return None


def minimize(
    problem: JProblem,
    a0: np.ndarray,
    *,
    tol: float,
    max_iter: int,
    strategy: str = "newton",
    newton_switch: float = 1e-3,
) -> MinimizeResult:
    """Minimize F from a0 until the L1 gradient norm falls below tol.

    strategy:
      "newton"   damped Newton with gradient-descent fallback (equilibrium
                 solves)
      "auto"     Barzilai-Borwein gradient descent, switching to Newton once
                 the residual drops below ``newton_switch`` (implicit steps)
      "gradient" pure BB gradient descent (cross-check backend)
    """
    if strategy not in ("newton", "auto", "gradient"):
        raise ValueError(f"unknown strategy {strategy!r}")
    a = np.array(a0, dtype=float, copy=True)
    grad, nu, w, weights, theta_diag = gradient_parts(problem, a)
    residual = float(np.sum(np.abs(grad)))
    f_cur = value(problem, a)
    prev_a = prev_grad = None
    bb_step = 1.0

    def _roundoff_limited(slope, step):
        # the Armijo test is meaningless once the predicted decrease drops
        # below the floating-point resolution of the objective
        return abs(slope) * step < 1e-12 * max(abs(f_cur), 1.0)

    for iteration in range(max_iter):
        if residual <= tol:
            return MinimizeResult(a, theta_diag, nu, w, residual, iteration)

        use_newton = strategy == "newton" or (
            strategy == "auto" and residual < newton_switch
        )
        direction = None
        step0 = 1.0
        if use_newton:
            hess = hessian(problem, a, nu, w, weights)
            try:
                cand = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                cand = None
            if cand is not None and float(np.dot(grad, cand)) < 0.0:
                direction = cand
        if direction is None:
            # gradient step, BB1 seed from the previous pair when available
            if prev_a is not None:
                s = a - prev_a
                y = grad - prev_grad
                sy = float(np.dot(s, y))
                if sy > 0.0:
                    bb_step = float(np.dot(s, s)) / sy
            direction = -grad
            step0 = bb_step
        slope = float(np.dot(grad, direction))

        if _roundoff_limited(slope, step0):
            # endgame: accept a (possibly shortened) step iff the gradient
            # itself shrinks
            step = step0
            accepted = None
            for _ in range(30):
                trial = a + step * direction
                try:
                    parts = gradient_parts(problem, trial)
                    res_trial = float(np.sum(np.abs(parts[0])))
                except NumericalFailureError:
                    res_trial = np.inf
                if res_trial < residual:
                    accepted = (trial, parts, res_trial)
                    break
                step *= 0.5
            if accepted is None:
                raise NonConvergenceError(
                    "stalled at floating-point resolution",
                    residual=residual,
                    iterations=iteration,
                )
            prev_a, prev_grad = a, grad
            a, parts, residual = accepted
            grad, nu, w, weights, theta_diag = parts
            f_cur = value(problem, a)
            continue

        moved = _armijo(problem, a, f_cur, grad, direction, slope, step0)
        if moved is None and step0 != 1.0:
            moved = _armijo(problem, a, f_cur, grad, direction, slope, 1.0)
        if moved is None:
            raise NonConvergenceError(
                "line search failed to make progress",
                residual=residual,
                iterations=iteration,
            )
        prev_a, prev_grad = a, grad
        a, f_cur, _ = moved
        grad, nu, w, weights, theta_diag = gradient_parts(problem, a)
        residual = float(np.sum(np.abs(grad)))

    if residual <= tol:
        return MinimizeResult(a, theta_diag, nu, w, residual, max_iter)
    raise NonConvergenceError(
        f"no convergence after {max_iter} iterations (residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )

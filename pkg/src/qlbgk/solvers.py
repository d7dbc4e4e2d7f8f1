"""Time integrators: AP scheme, split-step reference and QDD limit.

One AP step advances (n_n, rho_n) by

  1. building the residual-current source from the rotated previous state,
  2. solving the implicit modified-QDD step for (A, theta, n_{n+1}),
  3. assembling rho_{n+1} from the damped free evolution of rho_n, the new
     equilibrium, and the first-order commutator correction.

The split-step reference composes exact relaxation and exact free transport
in Strang order; its only error is the splitting error, which makes it a
suitable oracle once the substep resolves the relaxation scale eps^2.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import chemical_potential, equilibrium, free_energy
from .errors import (
    GridMismatchError,
    InvalidConfigurationError,
    InvalidInputError,
    NumericalFailureError,
    StiffnessWarning,
)
from .grid import DerivativeOperator, GridSpec, HamiltonianSet
from .kernels import a_weighted, damped_free_map, kappa, xi
from .operators import (
    DensityOperator,
    crank_nicolson_propagator,
    current,
    density,
    div_current,
    e2_norm,
    propagate_exact,
    trace_norm,
)
from .qdd_step import QddSolveOptions, QddStepInput, solve_step

logger = logging.getLogger(__name__)

EXACT = "exact"
CRANK_NICOLSON = "crank-nicolson"


@dataclass(frozen=True)
class Model:
    """Immutable spatial setup shared by every solver in a run."""

    grid: GridSpec
    deriv: DerivativeOperator
    ham: HamiltonianSet
    t_e: float

    def __post_init__(self):
        if not (self.t_e > 0.0):
            raise InvalidConfigurationError(f"temperature must be positive, got {self.t_e}")


INTEGRAL = "integral"
COMMUTATOR = "commutator"


@dataclass(frozen=True)
class SolverOptions:
    """Numerical knobs of the AP iteration.

    rho_update selects how the equilibrium part of the operator update is
    assembled: "integral" evaluates int_0^x S_tau[theta] dtau exactly in the
    eigenbasis of H (positivity-preserving; default), "commutator" uses its
    two-term expansion theta (1-e^-x) - eps kappa [iH, theta].  The two agree
    up to the double-commutator remainder; the expansion form feeds a weakly
    unstable resonance of deep spectral-tail modes in a band of (eps, dt)
    (observed growth up to ~10x per step at eps ~ 0.1 on the 32-point grid).
    """

    optimizer_tol: float = 1e-10
    optimizer_max_iter: int = 500
    optimizer_strategy: str = "auto"
    newton_switch: float = 1e-3
    propagator: str = EXACT
    cn_substeps: int = 1
    rho_update: str = INTEGRAL
    record_diagnostics: bool = True
    positivity_floor: float | None = None  # hard-fail when min eig < -floor*trace


@dataclass(frozen=True)
class SchemeState:
    step_index: int
    time: float
    density: np.ndarray
    rho: DensityOperator
    potential: np.ndarray | None = None  # chemical potential of theta[n]


@dataclass(frozen=True)
class RunRecord:
    step_index: int
    time: float
    total_mass: float
    rho_trace: float
    min_eigenvalue: float
    hermiticity_residual: float
    free_energy: float
    trace_norm: float
    e2_norm: float
    theta_current_max: float
    el_residual: float
    optimizer_iterations: int


@dataclass(frozen=True)
class Sigma1Residual:
    s: float
    t: float
    e2_norm_value: float
    div_current_l1: float


@dataclass
class Trajectory:
    """States sampled at a fixed time grid."""

    times: np.ndarray
    densities: np.ndarray  # (samples, n)
    rhos: np.ndarray  # (samples, n, n)
    grid: GridSpec
    substep: float | None = None  # resolution of the generating integrator

    def index_at(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        spacing = np.min(np.diff(self.times)) if len(self.times) > 1 else np.inf
        if abs(float(self.times[idx]) - t) > 0.5 * spacing + 1e-12:
            raise InvalidInputError(
                f"trajectory has no sample near t = {t} (closest {self.times[idx]})"
            )
        return idx

    def rho_at(self, t: float) -> DensityOperator:
        return DensityOperator(self.rhos[self.index_at(t)], self.grid)

    def density_at(self, t: float) -> np.ndarray:
        return self.densities[self.index_at(t)]


@dataclass(frozen=True)
class RunResult:
    final_state: SchemeState
    records: list[RunRecord]
    trajectory: Trajectory


@dataclass(frozen=True)
class ErrorSeries:
    times: np.ndarray
    l1_density: np.ndarray
    e2_operator: np.ndarray


def _propagator_matrix(model: Model, phase_time: float, opts: SolverOptions):
    if opts.propagator == CRANK_NICOLSON:
        return crank_nicolson_propagator(model.ham, phase_time, opts.cn_substeps)
    if opts.propagator == EXACT:
        return None  # use propagate_exact directly
    raise InvalidConfigurationError(f"unknown propagator backend {opts.propagator!r}")


def _conjugate(model: Model, rho: DensityOperator, phase_time: float, opts: SolverOptions):
    u = _propagator_matrix(model, phase_time, opts)
    if u is None:
        return propagate_exact(rho, model.ham, phase_time)
    return DensityOperator(u @ rho.matrix @ u.conj().T, model.grid)


def _one_minus_exp(x: float) -> float:
    """1 - e^{-x} without cancellation for small x."""
    return float(-np.expm1(-x)) if x < 700.0 else 1.0


def damped_equilibrium_integral(theta: np.ndarray, eps: float, x: float, ham) -> np.ndarray:
    """int_0^x S_{eps,tau}[theta] dtau evaluated exactly in the basis of H.

    Elementwise in that basis the integrand is theta_pq e^{-tau(1 + i eps
    (lam_p - lam_q))}, so each entry integrates in closed form.  The result
    is a positive combination of unitary conjugations of theta, hence PSD
    whenever theta is, and expands to theta (1-e^{-x}) - eps kappa [iH,theta]
    plus a double-commutator remainder.
    """
    v = ham.eigenvectors
    lam = ham.eigenvalues
    core = v.T @ theta @ v
    z = 1.0 + 1j * eps * (lam[:, None] - lam[None, :])
    if x > 700.0:
        weights = 1.0 / z
    else:
        weights = (1.0 - np.exp(-x * z)) / z
    out = v @ (core * weights) @ v.T
    return 0.5 * (out + out.conj().T)


def ap_step(
    state: SchemeState,
    model: Model,
    eps: float,
    dt: float,
    opts: SolverOptions = SolverOptions(),
) -> tuple[SchemeState, RunRecord]:
    """Advance one AP step of size dt at stiffness parameter eps."""
    if not (eps > 0.0 and dt > 0.0):
        raise InvalidInputError(f"eps and dt must be positive, got {eps}, {dt}")
    x = dt / (eps * eps)
    relax_weight = _one_minus_exp(x)
    damping = 1.0 - relax_weight
    a_mid = a_weighted(eps, dt)
    kap = kappa(eps, dt)
    xi_val = xi(eps, dt)

    # residual-current source from the rotated previous operator
    rho_rot = _conjugate(model, state.rho, a_mid / eps, opts)
    source = -eps * relax_weight * div_current(rho_rot, model.deriv)
    # the divergence is exactly mean-free up to roundoff; project it so the
    # step input validation never trips on accumulated noise
    source = source - source.mean()

    step_input = QddStepInput(
        n_prev=state.density,
        source=source,
        xi=xi_val,
        ham=model.ham,
        t_e=model.t_e,
        deriv=model.deriv,
    )
    qdd_opts = QddSolveOptions(
        tol=opts.optimizer_tol,
        max_iter=opts.optimizer_max_iter,
        strategy=opts.optimizer_strategy,
        newton_switch=opts.newton_switch,
        initial_a=state.potential,
    )
    result = solve_step(step_input, qdd_opts)
    theta = result.theta_next.operator.matrix

    rho_free = _conjugate(model, state.rho, dt / eps, opts)
    if opts.rho_update == INTEGRAL:
        gain = damped_equilibrium_integral(theta, eps, x, model.ham)
        rho_next_mat = damping * rho_free.matrix + gain
    elif opts.rho_update == COMMUTATOR:
        comm = model.ham.h @ theta - theta @ model.ham.h
        rho_next_mat = (
            damping * rho_free.matrix + relax_weight * theta - 1j * eps * kap * comm
        )
    else:
        raise InvalidConfigurationError(f"unknown rho update {opts.rho_update!r}")
    rho_next = DensityOperator(rho_next_mat, model.grid)
    herm_residual = rho_next.hermiticity_residual()
    rho_next = rho_next.symmetrized()

    new_state = SchemeState(
        step_index=state.step_index + 1,
        time=(state.step_index + 1) * dt,
        density=result.n_next,
        rho=rho_next,
        potential=result.a_next,
    )
    record = _make_record(
        new_state, model, opts, herm_residual, result.theta_next,
        result.residual, result.iterations,
    )
    if opts.positivity_floor is not None and record.min_eigenvalue < (
        -opts.positivity_floor * abs(record.rho_trace)
    ):
        raise NumericalFailureError(
            f"positivity floor breached at step {new_state.step_index}: "
            f"min eigenvalue {record.min_eigenvalue:.3e}"
        )
    return new_state, record


def _make_record(
    state: SchemeState,
    model: Model,
    opts: SolverOptions,
    herm_residual: float,
    theta,
    el_residual: float,
    iterations: int,
) -> RunRecord:
    if not opts.record_diagnostics:
        return RunRecord(
            state.step_index, state.time, model.grid.integrate(state.density),
            state.rho.trace(), np.nan, herm_residual, np.nan, np.nan, np.nan,
            np.nan, el_residual, iterations,
        )
    rho = state.rho
    min_eig = rho.min_eigenvalue()
    if min_eig < -1e-8 * max(abs(rho.trace()), 1e-300):
        logger.warning(
            "state lost positivity at t=%.6g: min eigenvalue %.3e", state.time, min_eig
        )
    return RunRecord(
        step_index=state.step_index,
        time=state.time,
        total_mass=model.grid.integrate(state.density),
        rho_trace=rho.trace(),
        min_eigenvalue=min_eig,
        hermiticity_residual=herm_residual,
        free_energy=free_energy(rho, model.ham, model.t_e, negative_tol=np.inf),
        trace_norm=trace_norm(rho),
        e2_norm=e2_norm(rho, model.ham.h0),
        theta_current_max=float(np.max(np.abs(current(theta.operator, model.deriv)))),
        el_residual=el_residual,
        optimizer_iterations=iterations,
    )


def well_prepared_state(model: Model, n0: np.ndarray, **solve_opts) -> SchemeState:
    """Local-equilibrium initial state rho_0 = theta[n_0]."""
    a, maxw, _ = chemical_potential(n0, model.ham, model.t_e, **solve_opts)
    return SchemeState(
        step_index=0,
        time=0.0,
        density=maxw.density,
        rho=maxw.operator,
        potential=a,
    )


def ill_prepared_state(
    model: Model,
    n0: np.ndarray,
    weight: float,
    rng: np.random.Generator,
    modes: int = 3,
) -> SchemeState:
    """Gibbs-like mixture perturbed by a random current-carrying pure state.

    The state has the same total mass as n0 but is far from local
    equilibrium, so runs develop an initial layer of width ~eps^2.
    """
    if not (0.0 <= weight < 1.0):
        raise InvalidInputError(f"weight must be in [0, 1), got {weight}")
    grid, ham = model.grid, model.ham
    mass = grid.integrate(np.asarray(n0, dtype=float))
    gibbs = equilibrium(np.full(grid.n_points, mass / grid.length), ham, model.t_e)
    g = gibbs.operator.matrix

    x = grid.nodes
    psi = np.zeros(grid.n_points, dtype=complex)
    for m in range(1, modes + 1):
        c = rng.normal() + 1j * rng.normal()
        psi += c * np.exp(2j * np.pi * m * x / grid.length)
    psi += rng.normal() + 0j
    psi /= np.sqrt(grid.integrate(np.abs(psi) ** 2))
    pure = mass * grid.spacing * np.outer(psi, psi.conj())

    rho = (1.0 - weight) * g + weight * pure
    rho_op = DensityOperator(rho, grid).symmetrized()
    return SchemeState(
        step_index=0,
        time=0.0,
        density=density(rho_op),
        rho=rho_op,
        potential=None,
    )


def _ensure_potential(state: SchemeState, model: Model) -> SchemeState:
    if state.potential is not None:
        return state
    a, _, _ = chemical_potential(state.density, model.ham, model.t_e)
    return replace(state, potential=a)


def ap_run(
    model: Model,
    initial: SchemeState,
    eps: float,
    dt: float,
    t_final: float,
    opts: SolverOptions = SolverOptions(),
) -> RunResult:
    """Iterate ap_step for floor(t_final/dt) steps from the given state."""
    n_steps = int(np.floor(t_final / dt + 1e-9))
    state = _ensure_potential(initial, model)
    times = [0.0]
    densities = [state.density.copy()]
    rhos = [np.array(state.rho.matrix, dtype=complex)]
    records: list[RunRecord] = []
    for _ in range(n_steps):
        state, record = ap_step(state, model, eps, dt, opts)
        records.append(record)
        times.append(state.time)
        densities.append(state.density.copy())
        rhos.append(np.array(state.rho.matrix, dtype=complex))
    traj = Trajectory(
        times=np.array(times),
        densities=np.array(densities),
        rhos=np.array(rhos),
        grid=model.grid,
        substep=dt,
    )
    return RunResult(final_state=state, records=records, trajectory=traj)


def splitstep_run(
    model: Model,
    initial: SchemeState,
    eps: float,
    t_final: float,
    substep: float,
    sample_dt: float,
    *,
    equilibrium_tol: float = 1e-11,
    stiffness_safety: float = 0.5,
) -> Trajectory:
    """Strang-split reference: exact relaxation and exact free transport.

    The substep is snapped down so that an integer number of substeps fits in
    each sample interval; samples are produced at multiples of sample_dt.
    """
    if substep > stiffness_safety * eps * eps:
        warnings.warn(
            f"substep {substep:.3e} does not resolve the relaxation scale "
            f"eps^2 = {eps * eps:.3e}",
            StiffnessWarning,
            stacklevel=2,
        )
    n_samples = int(round(t_final / sample_dt))
    if abs(n_samples * sample_dt - t_final) > 1e-9 * max(1.0, t_final):
        raise InvalidInputError(
            f"t_final = {t_final} is not a multiple of sample_dt = {sample_dt}"
        )
    k_sub = max(1, int(np.ceil(sample_dt / substep - 1e-12)))
    delta = sample_dt / k_sub
    total = n_samples * k_sub

    phi_half = float(np.exp(-delta / (2.0 * eps * eps)))
    phi_full = phi_half * phi_half
    v = model.ham.eigenvectors
    phases = np.exp(-1j * (delta / eps) * model.ham.eigenvalues)
    u_mat = (v * phases) @ v.conj().T

    state = _ensure_potential(initial, model)
    a_warm = state.potential
    y = np.array(state.rho.matrix, dtype=complex)

    times = [0.0]
    densities = [density(state.rho)]
    rhos = [y.copy()]

    def relax_solve(mat):
        nonlocal a_warm
        n = np.diag(mat).real / model.grid.spacing
        a_warm, maxw, _ = chemical_potential(
            n, model.ham, model.t_e, tol=equilibrium_tol, initial=a_warm,
            max_iter=200,
        )
        return maxw.operator.matrix

    # first half relaxation, then transport
    theta = relax_solve(y)
    y = theta + (y - theta) * phi_half
    y = u_mat @ y @ u_mat.conj().T
    for k in range(1, total + 1):
        y = 0.5 * (y + y.conj().T)
        theta = relax_solve(y)
        if k % k_sub == 0:
            z = theta + (y - theta) * phi_half
            times.append(k * delta)
            densities.append(np.diag(z).real / model.grid.spacing)
            rhos.append(z)
        if k < total:
            y = theta + (y - theta) * phi_full
            y = u_mat @ y @ u_mat.conj().T

    return Trajectory(
        times=np.array(times),
        densities=np.array(densities),
        rhos=np.array(rhos),
        grid=model.grid,
        substep=delta,
    )


def qdd_limit_run(
    model: Model,
    n0: np.ndarray,
    dt: float,
    t_final: float,
    opts: SolverOptions = SolverOptions(),
) -> RunResult:
    """Implicit QDD iteration (xi = dt, zero source); rho_n = theta[n_n]."""
    n_steps = int(np.floor(t_final / dt + 1e-9))
    a_warm, maxw, _ = chemical_potential(
        np.asarray(n0, dtype=float), model.ham, model.t_e, tol=opts.optimizer_tol
    )
    n = maxw.density
    times = [0.0]
    densities = [n.copy()]
    rhos = [np.array(maxw.operator.matrix, dtype=complex)]
    records: list[RunRecord] = []
    zero_source = np.zeros(model.grid.n_points)
    for step_index in range(1, n_steps + 1):
        step_input = QddStepInput(
            n_prev=n,
            source=zero_source,
            xi=dt,
            ham=model.ham,
            t_e=model.t_e,
            deriv=model.deriv,
        )
        result = solve_step(
            step_input,
            QddSolveOptions(
                tol=opts.optimizer_tol,
                max_iter=opts.optimizer_max_iter,
                strategy=opts.optimizer_strategy,
                newton_switch=opts.newton_switch,
                initial_a=a_warm,
            ),
        )
        n, a_warm = result.n_next, result.a_next
        state = SchemeState(
            step_index=step_index,
            time=step_index * dt,
            density=n,
            rho=result.theta_next.operator,
            potential=a_warm,
        )
        records.append(
            _make_record(
                state, model, opts, 0.0, result.theta_next,
                result.residual, result.iterations,
            )
        )
        times.append(state.time)
        densities.append(n.copy())
        rhos.append(np.array(result.theta_next.operator.matrix, dtype=complex))
    traj = Trajectory(
        times=np.array(times),
        densities=np.array(densities),
        rhos=np.array(rhos),
        grid=model.grid,
        substep=dt,
    )
    final = SchemeState(n_steps, n_steps * dt, n, DensityOperator(rhos[-1], model.grid), a_warm)
    return RunResult(final_state=final, records=records, trajectory=traj)


def sigma1_residual(
    reference: Trajectory,
    s: float,
    t: float,
    eps: float,
    model: Model,
    *,
    equilibrium_tol: float = 1e-11,
) -> Sigma1Residual:
    """Defect of the first-order expansion between reference states at s and t.

    sigma_1 = rho(t) - S_{eps,(t-s)/eps^2}[rho(s)]
              - theta[n(t)] (1 - e^{-(t-s)/eps^2})
              + i eps kappa_eps(t-s) [H, theta[n(t)]]
    """
    if t < s:
        raise InvalidInputError(f"need t >= s, got s={s}, t={t}")
    if reference.substep is not None and reference.substep > 0.2 * eps * eps:
        raise InvalidInputError(
            f"reference substep {reference.substep:.3e} does not resolve eps^2 = "
            f"{eps * eps:.3e}"
        )
    rho_s = reference.rho_at(s)
    rho_t = reference.rho_at(t)
    delta = t - s
    damped = damped_free_map(rho_s, eps, delta / (eps * eps), model.ham)
    maxw = equilibrium(
        reference.density_at(t), model.ham, model.t_e, tol=equilibrium_tol
    )
    theta = maxw.operator.matrix
    comm = model.ham.h @ theta - theta @ model.ham.h
    weight = _one_minus_exp(delta / (eps * eps))
    mat = (
        rho_t.matrix
        - damped.matrix
        - weight * theta
        + 1j * eps * kappa(eps, delta) * comm
    )
    op = DensityOperator(mat, model.grid).symmetrized()
    return Sigma1Residual(
        s=s,
        t=t,
        e2_norm_value=e2_norm(op, model.ham.h0),
        div_current_l1=model.grid.l1_norm(div_current(op, model.deriv)),
    )


def error_metrics(a: Trajectory, b: Trajectory, ham: HamiltonianSet) -> ErrorSeries:
    """L1 density and E2 operator error between two trajectories.

    Sample times of the coarser trajectory are matched to the nearest samples
    of the finer one.
    """
    if a.grid != b.grid:
        raise GridMismatchError("trajectories live on different grids")
    coarse, fine = (a, b) if len(a.times) <= len(b.times) else (b, a)
    times, l1, e2 = [], [], []
    for i, t in enumerate(coarse.times):
        j = fine.index_at(float(t))
        diff_n = coarse.densities[i] - fine.densities[j]
        diff_rho = coarse.rhos[i] - fine.rhos[j]
        times.append(float(t))
        l1.append(coarse.grid.l1_norm(diff_n))
        e2.append(e2_norm(DensityOperator(diff_rho, coarse.grid), ham.h0))
    return ErrorSeries(
        times=np.array(times), l1_density=np.array(l1), e2_operator=np.array(e2)
    )


def fit_order(dts, errors) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    dts = np.asarray(dts, dtype=float)
    errors = np.maximum(np.asarray(errors, dtype=float), 1e-300)
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])

"""Kernel reconstruction from the integral measurement.

Each step is decoupled: first the scalar kernel value at t_i is read
off the discrete measurement identity,

    K_i = [ (f_{i-1},1) - m'_i - (g_i,1)_Gamma
            - sum_{k=1..i-1} K_k m_{i-k} tau ] / [ (h_i,1) + m_0 tau ],

then the elliptic field problem is solved with the now-known K_i
(reusing the forward stepper).  The denominator carries the plus sign
that falls out of splitting the k = i term from the convolution sum;
a debug switch flips it to minus for comparison runs.  The update is
well defined for tau below

    tau0 = min(1, omega / (2 |m_0|)),

which is checked up front (overridable with ``force``).

The value K_0 is pinned by the identity at t = 0,
K_0 = [ (f_0,1) - m'(0) - (g_0,1)_Gamma ] / (h_0,1), using the supplied
initial derivative when the series carries one and the first forward
difference otherwise.  K_0 never enters the time stepping; it only
completes the reported kernel.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import expr
from .errors import (
    NonFiniteError,
    SingularUpdateError,
    StepThresholdError,
    ValidationError,
)
from .forward import KernelSeries, TimeStepper, Trajectory, _convolution_values
from .grid import GridFunction, SpatialGrid, grad_seminorm_sq, stiffness_matvec
from .problem import MeasurementSeries, ProblemSpec, TimeGrid, validate_floor

DENOMINATOR_GUARD = 1e-12


@dataclass(frozen=True)
class ThresholdReport:
    """Outcome of the step-size admissibility check."""

    omega: float
    m0: float
    tau: float
    tau0: float
    margin: float  # omega - |m0| tau
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def check_step_threshold(spec: ProblemSpec, m0: float, tau: float) -> ThresholdReport:
    """tau must stay below tau0 = min(1, omega / (2 |m0|))."""
    omega = spec.omega_floor
    tau0 = 1.0 if m0 == 0.0 else min(1.0, omega / (2.0 * abs(m0)))
    return ThresholdReport(
        omega=omega,
        m0=m0,
        tau=tau,
        tau0=tau0,
        margin=omega - abs(m0) * tau,
        passed=tau < tau0,
    )


@dataclass(frozen=True)
class Diagnostics:
    """Discrete stability functionals accumulated over a reconstruction."""

    max_abs_kernel: float
    max_state_norm_sq: float
    grad_energy: float  # sum ||grad u_i||^2 tau
    state_increment_sum_sq: float  # sum ||u_i - u_{i-1}||^2
    max_grad_norm_sq: float
    time_derivative_energy: float  # sum ||du_i||^2 tau
    grad_increment_sum_sq: float  # sum ||grad(u_i - u_{i-1})||^2
    laplacian_energy: float  # sum ||lumped stiffness residual||^2 tau
    kernel_derivative_energy: float  # sum |dK_i|^2 tau
    min_denominator_magnitude: float
    max_compat_residual: float  # relative, worst step

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReconstructionResult:
    """Recovered kernel/trajectory pair with run metadata."""

    kernel: KernelSeries
    trajectory: Trajectory
    diagnostics: Diagnostics
    denominators: np.ndarray  # per step i = 1..n
    compat_residuals: np.ndarray  # relative, per step i = 1..n
    measured: np.ndarray  # (u_i, 1) of the reconstructed trajectory
    derivative_source: str
    threshold: ThresholdReport
    config: dict


def kernel_difference_energy(kernel, tau: float) -> float:
    """sum_i ((K_i - K_{i-1}) / tau)^2 tau over the whole series."""
    values = kernel.values if isinstance(kernel, KernelSeries) else np.asarray(kernel)
    if values.size < 2:
        return 0.0
    return float(np.sum(np.diff(values) ** 2)) / tau


def _update_parts(
    stepper: TimeStepper,
    measurement: MeasurementSeries,
    kernel_values: np.ndarray,
    u_prev: np.ndarray,
    i: int,
    denominator_sign: float,
) -> tuple[float, float]:
    """Numerator and denominator of the kernel update at step i."""
    tg = stepper.timegrid
    tau = tg.tau
    t_prev = tg.nodes[i - 1]
    t_i = tg.nodes[i]
    f_mean = stepper.mean(stepper.f_field(t_prev, u_prev))
    g_mean = stepper.boundary_mean(stepper.g_field(t_i))
    h_mean = stepper.mean(stepper.h_field(t_i))
    m = measurement.values
    history = float(np.dot(kernel_values[1:i], m[i - 1 : 0 : -1])) * tau
    numerator = f_mean - measurement.derivative_at(i) - g_mean - history
    denominator = h_mean + denominator_sign * measurement.m0 * tau
    return numerator, denominator


def kernel_update(
    spec: ProblemSpec,
    grid: SpatialGrid,
    measurement: MeasurementSeries,
    kernel_prefix: np.ndarray,
    u_prev: GridFunction | np.ndarray,
    i: int,
    denominator_sign: float = 1.0,
    stepper: TimeStepper | None = None,
) -> float:
    """Solve the scalar measurement identity for K_i (1 <= i <= n).

    ``kernel_prefix`` holds K_0..K_{i-1}; earlier values enter through
    the measurement convolution only, so the update never looks at
    states beyond u_{i-1}.
    """
    if stepper is None:
        stepper = TimeStepper(spec, grid, measurement.timegrid)
    if not 1 <= i <= measurement.timegrid.n:
        raise IndexError(f"step index {i} out of range 1..{measurement.timegrid.n}")
    kernel_values = np.asarray(kernel_prefix, dtype=float)
    if kernel_values.size < i:
        raise ValidationError(f"kernel prefix must hold K_0..K_{i-1}")
    u_values = u_prev.values if isinstance(u_prev, GridFunction) else np.asarray(u_prev)
    numerator, denominator = _update_parts(
        stepper, measurement, kernel_values, u_values, i, denominator_sign
    )
    if abs(denominator) < DENOMINATOR_GUARD:
        raise SingularUpdateError(
            f"kernel-update denominator {denominator:.3e} below "
            f"{DENOMINATOR_GUARD:g} at step {i}",
            step=i,
        )
    return numerator / denominator


def initial_kernel_value(
    stepper: TimeStepper, measurement: MeasurementSeries
) -> float:
    """K_0 from the measurement identity at t = 0."""
    if measurement.initial_derivative is not None:
        mprime0 = measurement.initial_derivative
    else:
        # first forward difference as the stand-in for m'(0)
        mprime0 = measurement.derivative_at(1)
    u0 = stepper.initial_state()
    f_mean = stepper.mean(stepper.f_field(0.0, u0))
    g_mean = stepper.boundary_mean(stepper.g_field(0.0))
    h_mean = stepper.mean(stepper.h_field(0.0))
    if abs(h_mean) < DENOMINATOR_GUARD:
        raise SingularUpdateError(
            f"(h(0),1) = {h_mean:.3e} too small to define the initial kernel value",
            step=0,
        )
    return (f_mean - mprime0 - g_mean) / h_mean


def reconstruct(
    spec: ProblemSpec,
    grid: SpatialGrid,
    timegrid: TimeGrid,
    measurement: MeasurementSeries,
    force: bool = False,
    denominator_sign: float = 1.0,
    trace: Callable[[int, float, float, float, float], None] | None = None,
) -> ReconstructionResult:
    """Recover the kernel and state trajectory from measurement data.

    Raises StepThresholdError when tau >= tau0 unless ``force`` is set,
    FloorViolationError if |(h(t_i),1)| dips below the asserted floor,
    SingularUpdateError / NonFiniteError on numerical breakdown.
    """
    if measurement.timegrid != timegrid:
        raise ValidationError("measurement is not aligned with the time grid")
    validate_floor(spec, grid, timegrid)
    threshold = check_step_threshold(spec, measurement.m0, timegrid.tau)
    if not threshold.passed:
        if not force:
            raise StepThresholdError(
                f"tau = {timegrid.tau:g} exceeds tau0 = {threshold.tau0:g} "
                f"(omega = {threshold.omega:g}, |m0| = {abs(threshold.m0):g}); "
                "pass force to run anyway"
            )
        warnings.warn(
            f"running with tau = {timegrid.tau:g} >= tau0 = {threshold.tau0:g}; "
            "the kernel update may be ill-conditioned",
            RuntimeWarning,
            stacklevel=2,
        )

    stepper = TimeStepper(spec, grid, timegrid)
    n = timegrid.n
    tau = timegrid.tau

    kernel_values = np.empty(n + 1)
    kernel_values[0] = initial_kernel_value(stepper, measurement)
    if spec.kernel_exact is not None:
        k0_ref = float(expr.evaluate(spec.kernel_exact, {"t": 0.0}))
        if abs(kernel_values[0] - k0_ref) > 1e-3 * (1.0 + abs(k0_ref)):
            warnings.warn(
                f"initial kernel value {kernel_values[0]:.6g} disagrees with the "
                f"exact kernel at t=0 ({k0_ref:.6g})",
                RuntimeWarning,
                stacklevel=2,
            )

    states = np.empty((n + 1, *grid.shape))
    states[0] = stepper.initial_state()
    measured = np.empty(n + 1)
    measured[0] = stepper.mean(states[0])
    denominators = np.empty(n)
    residuals = np.empty(n)

    u0_fun = GridFunction(grid, states[0])
    max_state_norm_sq = stepper.mean(states[0] ** 2)
    max_grad_norm_sq = grad_seminorm_sq(u0_fun)
    grad_energy = 0.0
    state_increment = 0.0
    dudt_energy = 0.0
    grad_increment = 0.0
    laplacian_energy = 0.0

    for i in range(1, n + 1):
        numerator, denominator = _update_parts(
            stepper, measurement, kernel_values, states[i - 1], i, denominator_sign
        )
        if abs(denominator) < DENOMINATOR_GUARD:
            raise SingularUpdateError(
                f"kernel-update denominator {denominator:.3e} below "
                f"{DENOMINATOR_GUARD:g} at step {i}",
                step=i,
            )
        k_i = numerator / denominator
        if not np.isfinite(k_i):
            raise NonFiniteError("kernel value is not finite", step=i)
        kernel_values[i] = k_i
        denominators[i - 1] = denominator

        states[i] = stepper.step(i, kernel_values, states)
        if not np.all(np.isfinite(states[i])):
            raise NonFiniteError("state is not finite", step=i)
        measured[i] = stepper.mean(states[i])
        residuals[i - 1] = stepper.compat_residual(i, kernel_values, states, measured)

        u_i = states[i]
        diff = u_i - states[i - 1]
        max_state_norm_sq = max(max_state_norm_sq, stepper.mean(u_i**2))
        g_sq = float(np.sum(stiffness_matvec(grid, u_i) * u_i))
        max_grad_norm_sq = max(max_grad_norm_sq, g_sq)
        grad_energy += g_sq * tau
        inc_sq = stepper.mean(diff**2)
        state_increment += inc_sq
        dudt_energy += inc_sq / tau
        grad_increment += float(np.sum(stiffness_matvec(grid, diff) * diff))
        lumped_lap = stiffness_matvec(grid, u_i) / grid.weights
        laplacian_energy += stepper.mean(lumped_lap**2) * tau

        if trace is not None:
            trace(i, timegrid.nodes[i], k_i, denominator, residuals[i - 1])

    diagnostics = Diagnostics(
        max_abs_kernel=float(np.max(np.abs(kernel_values))),
        max_state_norm_sq=max_state_norm_sq,
        grad_energy=grad_energy,
        state_increment_sum_sq=state_increment,
        max_grad_norm_sq=max_grad_norm_sq,
        time_derivative_energy=dudt_energy,
        grad_increment_sum_sq=grad_increment,
        laplacian_energy=laplacian_energy,
        kernel_derivative_energy=kernel_difference_energy(kernel_values, tau),
        min_denominator_magnitude=float(np.min(np.abs(denominators))) if n else 0.0,
        max_compat_residual=float(np.max(residuals)) if n else 0.0,
    )
    return ReconstructionResult(
        kernel=KernelSeries(timegrid, kernel_values),
        trajectory=Trajectory(grid, timegrid, states),
        diagnostics=diagnostics,
        denominators=denominators,
        compat_residuals=residuals,
        measured=measured,
        derivative_source=measurement.provenance,
        threshold=threshold,
        config={
            "problem": spec.name,
            "extents": list(spec.extents),
            "cells": list(grid.cells),
            "n": timegrid.n,
            "T": timegrid.T,
            "omega": spec.omega_floor,
            "denominator_sign": denominator_sign,
            "forced": bool(force and not threshold.passed),
            "derivative_source": measurement.provenance,
        },
    )

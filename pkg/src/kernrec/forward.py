"""Forward time stepping with a known convolution kernel.

Each step solves the backward-Euler elliptic problem: find u_i with

    (u_i/tau, phi) + a(u_i, phi)
        = (f_{i-1} + u_{i-1}/tau - K_i h_i - conv_i, phi) - (g_i, phi)_Gamma

for all nodal test functions phi, where conv_i is the rectangle-rule
convolution sum_{k=1..i} K_k u_{i-k} tau (fully explicit in the state)
and f_{i-1} is evaluated at time t_{i-1} with state (u_{i-1}, grad u_{i-1}).

Because constants lie in the nodal test space, every computed step
satisfies the measurement identity

    dM_i + (g_i,1)_Gamma + K_i (h_i,1) + (conv_i,1) - (f_{i-1},1) = 0

up to solver roundoff, with M_i = (u_i, 1).  The relative size of that
residual is recorded per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr
from .errors import NonFiniteError, ValidationError
from .grid import (
    GridFunction,
    SpatialGrid,
    nodal_gradient,
    stiffness_diagonal,
    stiffness_matvec,
)
from .problem import MeasurementSeries, ProblemSpec, TimeGrid
from .solver import SpdOperator, solve_cg, solve_tridiagonal


@dataclass(frozen=True)
class KernelSeries:
    """Kernel samples K_0..K_n aligned with a time grid."""

    timegrid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.timegrid.n + 1,):
            raise ValidationError(
                f"expected {self.timegrid.n + 1} kernel samples, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("kernel series contains non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_expression(cls, tree: expr.Expression, timegrid: TimeGrid) -> "KernelSeries":
        values = np.asarray(expr.evaluate(tree, {"t": timegrid.nodes}), dtype=float)
        values = np.broadcast_to(values, (timegrid.n + 1,)).copy()
        return cls(timegrid, values)


@dataclass(frozen=True)
class Trajectory:
    """States u_0..u_n; u_0 is the interpolated initial expression."""

    grid: SpatialGrid
    timegrid: TimeGrid
    values: np.ndarray  # shape (n+1, *grid.shape)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = (self.timegrid.n + 1, *self.grid.shape)
        if values.shape != expected:
            raise ValidationError(f"trajectory shape {values.shape} != {expected}")
        object.__setattr__(self, "values", values)

    def state(self, i: int) -> GridFunction:
        return GridFunction(self.grid, self.values[i])

    @property
    def states(self) -> list[GridFunction]:
        return [self.state(i) for i in range(self.timegrid.n + 1)]

    def decimate(self, stride: int) -> "Trajectory":
        """Keep every stride-th state (for storage; stride must divide n)."""
        if stride < 1 or self.timegrid.n % stride != 0:
            raise ValidationError(
                f"stride {stride} does not divide the step count {self.timegrid.n}"
            )
        coarse = TimeGrid(self.timegrid.T, self.timegrid.n // stride)
        return Trajectory(self.grid, coarse, self.values[::stride].copy())


def interpolate(tree: expr.Expression, grid: SpatialGrid, t: float | None = None) -> np.ndarray:
    """Evaluate an expression at the grid nodes (optionally at time t)."""
    env: dict[str, object] = dict(grid.coordinate_fields())
    if t is not None:
        env["t"] = t
    out = np.asarray(expr.evaluate(tree, env), dtype=float)
    return np.broadcast_to(out, grid.shape).copy()


def convolution_quadrature(kernel: KernelSeries, states, i: int) -> GridFunction:
    """Rectangle-rule memory term sum_{k=1..i} K_k u_{i-k} tau at step i."""
    if isinstance(states, Trajectory):
        grid = states.grid
        values = states.values
    else:
        raise TypeError("states must be a Trajectory")
    if not 1 <= i <= kernel.timegrid.n:
        raise IndexError(f"step index {i} out of range 1..{kernel.timegrid.n}")
    if values.shape[0] < i:
        raise IndexError(f"need states u_0..u_{i-1}, trajectory holds {values.shape[0]}")
    conv = _convolution_values(kernel.values, values, i, kernel.timegrid.tau)
    return GridFunction(grid, conv)


def _convolution_values(
    kernel_values: np.ndarray, state_values: np.ndarray, i: int, tau: float
) -> np.ndarray:
    # pairs (K_1, u_{i-1}) ... (K_i, u_0)
    history = state_values[i - 1 :: -1]
    return np.tensordot(kernel_values[1 : i + 1], history, axes=([0], [0])) * tau


class TimeStepper:
    """Cached assembly for repeated backward-Euler steps on one grid."""

    def __init__(
        self,
        spec: ProblemSpec,
        grid: SpatialGrid,
        timegrid: TimeGrid,
        cg_tol: float = 1e-10,
        cg_max_iter: int = 5000,
    ):
        self.spec = spec
        self.grid = grid
        self.timegrid = timegrid
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.coords = grid.coordinate_fields()
        self.weights = grid.weights
        self.bweights = grid.boundary_weights
        tau = timegrid.tau
        if grid.ndim == 1:
            dx = grid.spacing[0]
            diag = self.weights / tau + stiffness_diagonal(grid)
            off = np.full(grid.cells[0], -1.0 / dx)
            self._banded = (diag, off, off)
            self._operator = None
        else:
            self._banded = None
            self._operator = SpdOperator(
                shift=1.0 / tau,
                mass_weights=self.weights,
                stiffness_matvec=lambda v: stiffness_matvec(grid, v),
                stiffness_diag=stiffness_diagonal(grid),
            )
        self._f_vars = expr.variables(spec.f)
        self._h_static = self._static_field(spec.h)
        self._g_static = self._static_field(spec.g)

    def _static_field(self, tree: expr.Expression) -> np.ndarray | None:
        if "t" in expr.variables(tree):
            return None
        return interpolate(tree, self.grid)

    def h_field(self, t: float) -> np.ndarray:
        if self._h_static is not None:
            return self._h_static
        return interpolate(self.spec.h, self.grid, t)

    def g_field(self, t: float) -> np.ndarray:
        if self._g_static is not None:
            return self._g_static
        return interpolate(self.spec.g, self.grid, t)

    def f_field(self, t: float, u_values: np.ndarray) -> np.ndarray:
        env: dict[str, object] = dict(self.coords)
        env["t"] = t
        env["u"] = u_values
        if "p" in self._f_vars or "q" in self._f_vars:
            grads = nodal_gradient(GridFunction(self.grid, u_values))
            env["p"] = grads[0].values
            env["q"] = grads[1].values if self.grid.ndim == 2 else 0.0
        else:
            env["p"] = 0.0
            env["q"] = 0.0
        out = np.asarray(expr.evaluate(self.spec.f, env), dtype=float)
        return np.broadcast_to(out, self.grid.shape)

    def mean(self, field: np.ndarray) -> float:
        """(field, 1) with the lumped quadrature."""
        return float(np.sum(self.weights * field))

    def boundary_mean(self, field: np.ndarray) -> float:
        """(field, 1)_Gamma with the edge-trapezoid quadrature."""
        return float(np.sum(self.bweights * field))

    def initial_state(self) -> np.ndarray:
        return interpolate(self.spec.u0, self.grid)

    def step(
        self, i: int, kernel_values: np.ndarray, state_values: np.ndarray
    ) -> np.ndarray:
        """Solve for u_i given K_1..K_i and u_0..u_{i-1}."""
        tau = self.timegrid.tau
        t_prev = self.timegrid.nodes[i - 1]
        t_i = self.timegrid.nodes[i]
        u_prev = state_values[i - 1]
        conv = _convolution_values(kernel_values, state_values, i, tau)
        f_prev = self.f_field(t_prev, u_prev)
        load = f_prev + u_prev / tau - kernel_values[i] * self.h_field(t_i) - conv
        rhs = self.weights * load - self.bweights * self.g_field(t_i)
        if self._banded is not None:
            diag, lower, upper = self._banded
            return solve_tridiagonal(diag, lower, upper, rhs)
        return solve_cg(self._operator, rhs, tol=self.cg_tol, max_iter=self.cg_max_iter)

    def compat_residual(
        self,
        i: int,
        kernel_values: np.ndarray,
        state_values: np.ndarray,
        measured: np.ndarray,
    ) -> float:
        """Relative size of the per-step measurement identity residual."""
        tau = self.timegrid.tau
        t_prev = self.timegrid.nodes[i - 1]
        t_i = self.timegrid.nodes[i]
        conv = _convolution_values(kernel_values, state_values, i, tau)
        terms = (
            (measured[i] - measured[i - 1]) / tau,
            self.boundary_mean(self.g_field(t_i)),
            kernel_values[i] * self.mean(self.h_field(t_i)),
            self.mean(conv),
            -self.mean(self.f_field(t_prev, state_values[i - 1])),
        )
        residual = abs(sum(terms))
        scale = max(abs(term) for term in terms)
        return residual / scale if scale > 0 else 0.0


@dataclass(frozen=True)
class ForwardRun:
    """Trajectory plus the discrete measurement it induces."""

    trajectory: Trajectory
    kernel: KernelSeries
    measured: np.ndarray  # M_i = (u_i, 1)
    compat_residuals: np.ndarray  # relative, one per step i = 1..n


def forward_step(
    spec: ProblemSpec,
    grid: SpatialGrid,
    kernel: KernelSeries,
    i: int,
    states,
) -> GridFunction:
    """One elliptic step of the scheme; states supplies u_0..u_{i-1}."""
    if isinstance(states, Trajectory):
        state_values = states.values
    else:
        state_values = np.asarray(states, dtype=float)
    if not 1 <= i <= kernel.timegrid.n:
        raise IndexError(f"step index {i} out of range 1..{kernel.timegrid.n}")
    if state_values.shape[0] < i or state_values.shape[1:] != grid.shape:
        raise ValidationError("state history does not cover u_0..u_{i-1} on this grid")
    stepper = TimeStepper(spec, grid, kernel.timegrid)
    return GridFunction(grid, stepper.step(i, kernel.values, state_values))


def run_forward(
    spec: ProblemSpec,
    grid: SpatialGrid,
    timegrid: TimeGrid,
    kernel: KernelSeries,
) -> ForwardRun:
    """Advance the full trajectory with a prescribed kernel."""
    if kernel.timegrid != timegrid:
        raise ValidationError("kernel series is not aligned with the time grid")
    stepper = TimeStepper(spec, grid, timegrid)
    n = timegrid.n
    states = np.empty((n + 1, *grid.shape))
    states[0] = stepper.initial_state()
    measured = np.empty(n + 1)
    measured[0] = stepper.mean(states[0])
    residuals = np.empty(n)
    for i in range(1, n + 1):
        states[i] = stepper.step(i, kernel.values, states)
        if not np.all(np.isfinite(states[i])):
            raise NonFiniteError("state blew up during forward run", step=i)
        measured[i] = stepper.mean(states[i])
        residuals[i - 1] = stepper.compat_residual(i, kernel.values, states, measured)
    trajectory = Trajectory(grid, timegrid, states)
    return ForwardRun(trajectory, kernel, measured, residuals)


def measurement_from_run(
    spec: ProblemSpec,
    grid: SpatialGrid,
    timegrid: TimeGrid,
    run: ForwardRun,
    derivative: str = "analytic",
) -> MeasurementSeries:
    """Wrap a forward run's M_i = (u_i, 1) as a measurement series.

    ``derivative="analytic"`` uses the spec's exact derivative
    expression when present; otherwise the backward difference of the
    computed measurement is substituted.  In the discrete case the
    value at t = 0 is pinned through the initial-time identity
    m'(0) = (f_0,1) - (g_0,1)_Gamma - K_0 (h_0,1), which the generator
    can evaluate because it knows K_0.
    """
    if derivative == "analytic" and spec.mprime_exact is not None:
        nodes = timegrid.nodes
        derivs = np.asarray(expr.evaluate(spec.mprime_exact, {"t": nodes[1:]}), dtype=float)
        derivs = np.broadcast_to(derivs, (timegrid.n,)).copy()
        initial = float(expr.evaluate(spec.mprime_exact, {"t": 0.0}))
        return MeasurementSeries(timegrid, run.measured, derivs, "analytic", initial)
    stepper = TimeStepper(spec, grid, timegrid)
    u0 = run.trajectory.values[0]
    initial = (
        stepper.mean(stepper.f_field(0.0, u0))
        - stepper.boundary_mean(stepper.g_field(0.0))
        - run.kernel.values[0] * stepper.mean(stepper.h_field(0.0))
    )
    return MeasurementSeries.from_samples(timegrid, run.measured, initial)


def generate_measurement(
    spec: ProblemSpec,
    grid: SpatialGrid,
    timegrid: TimeGrid,
    kernel: KernelSeries | expr.Expression | None = None,
    derivative: str = "analytic",
) -> MeasurementSeries:
    """Synthetic measurement from a forward run with a known kernel.

    Restriction onto a coarser reconstruction grid is done by the
    returned series' ``restrict`` (fine n must be a multiple of the
    coarse n).
    """
    if kernel is None:
        if spec.kernel_exact is None:
            raise ValidationError("no kernel available to generate data")
        kernel = spec.kernel_exact
    if not isinstance(kernel, KernelSeries):
        kernel = KernelSeries.from_expression(kernel, timegrid)
    run = run_forward(spec, grid, timegrid, kernel)
    return measurement_from_run(spec, grid, timegrid, run, derivative)

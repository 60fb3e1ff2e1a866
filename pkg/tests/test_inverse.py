import numpy as np
import pytest

from kernrec import expr
from kernrec.errors import SingularUpdateError, StepThresholdError, ValidationError
from kernrec.forward import KernelSeries, measurement_from_run, run_forward
from kernrec.grid import GridFunction
from kernrec.inverse import (
    check_step_threshold,
    initial_kernel_value,
    kernel_difference_energy,
    kernel_update,
    reconstruct,
)
from kernrec.problem import (
    MeasurementSeries,
    ProblemSpec,
    TimeGrid,
    preset_manufactured_1d,
    preset_zero_1d,
)


def _spec(f="0", h="1", g="0", u0="0", T=1.0, omega=1.0, **extra):
    return ProblemSpec(
        name="inline", extents=(1.0,), T=T, omega_floor=omega,
        f=expr.parse(f), h=expr.parse(h), g=expr.parse(g), u0=expr.parse(u0),
        **{k: (expr.parse(v) if isinstance(v, str) else v) for k, v in extra.items()},
    )


class TestStepThreshold:
    def test_passes_with_margin(self):
        report = check_step_threshold(_spec(omega=1.0), m0=1.0, tau=0.1)
        assert report.tau0 == 0.5
        assert report.passed
        assert abs(report.margin - 0.9) < 1e-15

    def test_zero_m0_caps_at_one(self):
        report = check_step_threshold(_spec(omega=1.0), m0=0.0, tau=0.99)
        assert report.tau0 == 1.0
        assert report.passed
        assert not check_step_threshold(_spec(omega=1.0), m0=0.0, tau=1.0).passed

    def test_violation(self):
        report = check_step_threshold(_spec(omega=0.2), m0=10.0, tau=0.05)
        assert report.tau0 == 0.01
        assert not report.passed

    def test_reconstruct_refuses_then_forced(self):
        spec = _spec(f="0", h="1", g="0", u0="10", omega=0.2)
        tg = TimeGrid(1.0, 20)  # tau = 0.05 > tau0 = 0.01
        grid = spec.make_grid(10)
        series = MeasurementSeries.from_expressions(
            tg, expr.parse("10*exp(-t)"), expr.parse("-10*exp(-t)")
        )
        with pytest.raises(StepThresholdError):
            reconstruct(spec, grid, tg, series)
        with pytest.warns(RuntimeWarning):
            result = reconstruct(spec, grid, tg, series, force=True)
        assert result.config["forced"] is True


class TestKernelUpdate:
    def test_zero_numerator_by_induction(self):
        # f = 0, g = 0, m' = 0 forces every K_i to vanish
        spec = _spec()
        tg = TimeGrid(1.0, 8)
        grid = spec.make_grid(10)
        series = MeasurementSeries(
            tg, np.full(9, 2.0), np.zeros(8), "analytic", initial_derivative=0.0
        )
        kernel = np.zeros(9)
        u_prev = GridFunction.constant(grid, 0.0)
        for i in range(1, 9):
            kernel[i] = kernel_update(spec, grid, series, kernel[:i], u_prev, i)
            assert kernel[i] == 0.0

    def test_direct_substitution(self):
        # (f_0,1)=2, m'_1=1, (h_1,1)=1, m_0=0 gives K_1 = 1
        spec = _spec(f="2")
        tg = TimeGrid(1.0, 4)
        grid = spec.make_grid(10)
        series = MeasurementSeries(
            tg, np.zeros(5), np.array([1.0, 0.0, 0.0, 0.0]), "analytic"
        )
        value = kernel_update(spec, grid, series, np.array([0.0]), GridFunction.constant(grid, 0.0), 1)
        assert abs(value - 1.0) < 1e-14

    def test_denominator_sign_flag(self):
        spec = _spec(f="2")
        tg = TimeGrid(1.0, 4)
        grid = spec.make_grid(10)
        series = MeasurementSeries(
            tg, np.full(5, 2.0), np.array([1.0, 0.0, 0.0, 0.0]), "analytic"
        )
        plus = kernel_update(spec, grid, series, np.array([0.0]), GridFunction.constant(grid, 0.0), 1)
        minus = kernel_update(
            spec, grid, series, np.array([0.0]), GridFunction.constant(grid, 0.0), 1,
            denominator_sign=-1.0,
        )
        tau = tg.tau
        assert abs(plus - 1.0 / (1.0 + 2.0 * tau)) < 1e-14
        assert abs(minus - 1.0 / (1.0 - 2.0 * tau)) < 1e-14

    def test_singular_denominator(self):
        # h = -1 while m0 tau = 1 cancels the denominator exactly
        spec = _spec(h="-1", u0="10")
        tg = TimeGrid(1.0, 10)  # tau = 0.1, m0 = 10
        grid = spec.make_grid(10)
        series = MeasurementSeries.from_samples(tg, np.full(11, 10.0))
        with pytest.raises(SingularUpdateError) as err:
            kernel_update(spec, grid, series, np.array([0.0]),
                          GridFunction.constant(grid, 10.0), 1)
        assert err.value.step == 1

    def test_prefix_too_short(self):
        spec = _spec()
        tg = TimeGrid(1.0, 4)
        grid = spec.make_grid(4)
        series = MeasurementSeries.from_samples(tg, np.zeros(5))
        with pytest.raises(ValidationError):
            kernel_update(spec, grid, series, np.array([]), GridFunction.constant(grid, 0.0), 1)


class TestInitialKernelValue:
    def test_manufactured_value(self):
        from kernrec.forward import TimeStepper

        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 50)
        grid = spec.make_grid(100)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        stepper = TimeStepper(spec, grid, tg)
        assert abs(initial_kernel_value(stepper, series) - 1.0) < 1e-12


class TestReconstruct:
    def test_zero_problem_exact(self):
        spec = preset_zero_1d()
        tg = TimeGrid(1.0, 100)
        grid = spec.make_grid(100)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        result = reconstruct(spec, grid, tg, series)
        assert np.all(result.kernel.values == 0.0)
        assert np.all(result.trajectory.values == 0.0)

    def test_same_grid_roundtrip(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 60)
        grid = spec.make_grid(60)
        kernel_in = KernelSeries.from_expression(spec.kernel_exact, tg)
        fwd = run_forward(spec, grid, tg, kernel_in)
        series = measurement_from_run(spec, grid, tg, fwd, derivative="discrete")
        result = reconstruct(spec, grid, tg, series)
        assert np.abs(result.kernel.values - kernel_in.values).max() <= 1e-8
        assert np.abs(result.trajectory.values - fwd.trajectory.values).max() <= 1e-8

    def test_same_grid_roundtrip_2d(self):
        spec = ProblemSpec(
            name="m2d", extents=(1.0, 1.0), T=1.0, omega_floor=1.0,
            f=expr.parse("(1+cos(pi*x)) + (1+t)*pi^2*cos(pi*x) + exp(-t) + t*(1+cos(pi*x))"),
            h=expr.parse("1"), g=expr.parse("0"), u0=expr.parse("1+cos(pi*x)"),
            kernel_exact=expr.parse("exp(-t)"),
        )
        tg = TimeGrid(1.0, 20)
        grid = spec.make_grid(10, 10)
        kernel_in = KernelSeries.from_expression(spec.kernel_exact, tg)
        fwd = run_forward(spec, grid, tg, kernel_in)
        series = measurement_from_run(spec, grid, tg, fwd, derivative="discrete")
        result = reconstruct(spec, grid, tg, series)
        assert np.abs(result.kernel.values - kernel_in.values).max() <= 1e-8
        assert np.abs(result.trajectory.values - fwd.trajectory.values).max() <= 1e-8

    def test_analytic_data_accuracy(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 100)
        grid = spec.make_grid(200)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        result = reconstruct(spec, grid, tg, series)
        reference = np.exp(-tg.nodes)
        assert np.abs(result.kernel.values - reference).max() <= 0.05

    def test_measurement_consistency(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 100)
        grid = spec.make_grid(200)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        result = reconstruct(spec, grid, tg, series)
        assert result.compat_residuals.max() <= 1e-9
        assert result.diagnostics.max_compat_residual <= 1e-9

    def test_determinism(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 40)
        grid = spec.make_grid(40)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        a = reconstruct(spec, grid, tg, series)
        b = reconstruct(spec, grid, tg, series)
        np.testing.assert_array_equal(a.kernel.values, b.kernel.values)
        np.testing.assert_array_equal(a.trajectory.values, b.trajectory.values)

    def test_decoupling_from_later_data(self):
        # corrupting the measurement beyond step i0 must not touch K_1..K_i0
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 40)
        grid = spec.make_grid(40)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        i0 = 25
        values = series.values.copy()
        derivs = series.derivatives.copy()
        values[i0 + 1 :] += 1.0
        derivs[i0:] -= 3.0  # derivative entries for steps > i0
        corrupted = MeasurementSeries(tg, values, derivs, "analytic", series.initial_derivative)
        a = reconstruct(spec, grid, tg, series)
        b = reconstruct(spec, grid, tg, corrupted)
        np.testing.assert_array_equal(a.kernel.values[: i0 + 1], b.kernel.values[: i0 + 1])
        np.testing.assert_array_equal(
            a.trajectory.values[: i0 + 1], b.trajectory.values[: i0 + 1]
        )
        assert np.any(a.kernel.values[i0 + 1 :] != b.kernel.values[i0 + 1 :])

    def test_continuity_in_the_data(self):
        # perturbation of size eps moves the kernel by O(eps)
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 100)
        grid = spec.make_grid(100)
        base = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        rec0 = reconstruct(spec, grid, tg, base)
        diffs = {}
        for eps in (1e-6, 1e-8):
            perturbed = MeasurementSeries.from_samples(
                tg, base.values + eps * np.cos(np.arange(tg.n + 1)), base.initial_derivative
            )
            rec1 = reconstruct(spec, grid, tg, perturbed)
            diffs[eps] = np.abs(rec1.kernel.values - rec0.kernel.values).max()
        assert diffs[1e-6] <= 1e-3  # observed amplification is about 1e2
        assert diffs[1e-8] <= 1e-5
        ratio = diffs[1e-6] / diffs[1e-8]
        assert 30 <= ratio <= 300  # linear response

    def test_denominator_sign_flag_changes_result(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 50)
        grid = spec.make_grid(50)
        kernel_in = KernelSeries.from_expression(spec.kernel_exact, tg)
        fwd = run_forward(spec, grid, tg, kernel_in)
        series = measurement_from_run(spec, grid, tg, fwd, derivative="discrete")
        plus = reconstruct(spec, grid, tg, series)
        minus = reconstruct(spec, grid, tg, series, denominator_sign=-1.0)
        assert np.abs(plus.kernel.values - kernel_in.values).max() <= 1e-8
        assert np.abs(minus.kernel.values - kernel_in.values).max() > 1e-4

    def test_initial_value_warning(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 20)
        grid = spec.make_grid(20)
        series = MeasurementSeries(
            tg,
            1.0 + tg.nodes,
            np.ones(tg.n),
            "analytic",
            initial_derivative=5.0,  # inconsistent with the exact kernel at t=0
        )
        with pytest.warns(RuntimeWarning):
            reconstruct(spec, grid, tg, series)

    def test_misaligned_measurement(self):
        spec = preset_manufactured_1d()
        series = MeasurementSeries.from_expressions(
            TimeGrid(1.0, 10), spec.m_exact, spec.mprime_exact
        )
        with pytest.raises(ValidationError):
            reconstruct(spec, spec.make_grid(10), TimeGrid(1.0, 20), series)

    def test_degenerate_zero_measurement_allowed(self):
        # m == 0 with nonzero forcing: update degenerates to
        # K_i = [(f,1) - (g,1)] / (h,1)
        spec = _spec(f="2")
        tg = TimeGrid(1.0, 10)
        grid = spec.make_grid(10)
        series = MeasurementSeries(tg, np.zeros(11), np.zeros(10), "analytic", 0.0)
        result = reconstruct(spec, grid, tg, series)
        np.testing.assert_allclose(result.kernel.values, 2.0, rtol=1e-12)

    def test_diagnostics_nonnegative(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 30)
        grid = spec.make_grid(30)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        d = reconstruct(spec, grid, tg, series).diagnostics
        for key, value in d.as_dict().items():
            assert np.isfinite(value), key
            assert value >= 0.0, key

    def test_trace_callback(self):
        spec = preset_manufactured_1d()
        tg = TimeGrid(1.0, 10)
        grid = spec.make_grid(10)
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        rows = []
        reconstruct(spec, grid, tg, series, trace=lambda *row: rows.append(row))
        assert len(rows) == 10
        assert rows[0][0] == 1 and rows[-1][0] == 10


class TestKernelDifferenceEnergy:
    def test_constant_series(self):
        tg = TimeGrid(1.0, 10)
        assert kernel_difference_energy(KernelSeries(tg, np.full(11, 3.0)), tg.tau) == 0.0

    def test_linear_series(self):
        # K_i = i tau has unit difference quotient, so the energy is T
        tg = TimeGrid(2.0, 16)
        kernel = KernelSeries(tg, tg.nodes.copy())
        assert abs(kernel_difference_energy(kernel, tg.tau) - 2.0) < 1e-12

    def test_exponential_approaches_integral(self):
        # analytic limit: integral of exp(-2t) over (0,1) = (1 - e^-2)/2
        exact = (1.0 - np.exp(-2.0)) / 2.0
        errs = {}
        for n in (100, 2000):
            tg = TimeGrid(1.0, n)
            kernel = KernelSeries(tg, np.exp(-tg.nodes))
            errs[n] = abs(kernel_difference_energy(kernel, tg.tau) - exact)
        assert errs[2000] < 1e-6
        assert errs[2000] < errs[100]

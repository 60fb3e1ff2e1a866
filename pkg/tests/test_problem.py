import math

import numpy as np
import pytest

from kernrec import expr
from kernrec.errors import ConfigError, FloorViolationError, ValidationError
from kernrec.grid import GridFunction, SpatialGrid, inner
from kernrec.problem import (
    MeasurementSeries,
    ProblemSpec,
    TimeGrid,
    load_problem,
    make_preset,
    measurement_from_csv,
    parse_config,
    preset_contaminant,
    preset_manufactured_1d,
    preset_zero_1d,
    spec_from_mapping,
    validate_floor,
)


def _simpson(fn, a, b, n=2000):
    # composite Simpson; n must be even
    s = np.linspace(a, b, n + 1)
    y = fn(s)
    h = (b - a) / n
    return h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


class TestTimeGrid:
    def test_nodes_and_tau(self):
        tg = TimeGrid(2.0, 4)
        assert tg.tau == 0.5
        np.testing.assert_allclose(tg.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_validation(self):
        with pytest.raises(ValidationError):
            TimeGrid(-1.0, 10)
        with pytest.raises(ValidationError):
            TimeGrid(1.0, 0)


class TestManufacturedPreset:
    def test_measurement_at_zero(self):
        spec = preset_manufactured_1d()
        assert expr.evaluate(spec.m_exact, {"t": 0.0}) == 1.0
        # quadrature of the initial state agrees: integral of 1+cos(pi x) is 1
        grid = spec.make_grid(64)
        u0 = GridFunction(grid, expr.evaluate(spec.u0, {"x": grid.axes[0]}))
        assert abs(inner(u0, GridFunction.constant(grid, 1.0)) - 1.0) < 1e-12

    def test_floor_satisfied(self):
        spec = preset_manufactured_1d()
        validate_floor(spec, spec.make_grid(50), TimeGrid(spec.T, 20))

    def test_convolution_closed_form(self):
        # quadrature of exp(-(t-s)) (1+s) ds must equal t at several t
        spec = preset_manufactured_1d()
        for t in (0.2, 0.5, 1.0):
            value = _simpson(lambda s: np.exp(-(t - s)) * (1 + s), 0.0, t)
            assert abs(value - t) < 1e-8

    @pytest.mark.parametrize("seed", [0, 1])
    def test_pde_residual_oracle(self, seed):
        # independent check: numeric derivatives of the exact state plus
        # quadrature of the memory term must satisfy the evolution law
        spec = preset_manufactured_1d()
        rng = np.random.default_rng(seed)

        def u_at(x, t):
            return expr.evaluate(spec.u_exact, {"x": x, "t": t})

        def kernel_at(t):
            return expr.evaluate(spec.kernel_exact, {"t": t})

        for _ in range(10):
            x = float(rng.uniform(0.05, 0.95))
            t = float(rng.uniform(0.05, 0.95))
            dt = 1e-5
            du_dt = (u_at(x, t + dt) - u_at(x, t - dt)) / (2 * dt)
            dx = 1e-4
            lap = (u_at(x + dx, t) - 2 * u_at(x, t) + u_at(x - dx, t)) / dx**2
            conv = _simpson(lambda s: kernel_at(t - s) * u_at(x, s), 0.0, t)
            h = expr.evaluate(spec.h, {"x": x, "t": t})
            f = expr.evaluate(spec.f, {"x": x, "t": t, "u": u_at(x, t), "p": 0.0, "q": 0.0})
            residual = du_dt - lap + kernel_at(t) * h + conv - f
            assert abs(residual) < 1e-6

    def test_neumann_data_consistent(self):
        # the exact state has vanishing x-derivative at both endpoints
        spec = preset_manufactured_1d()
        for t in (0.0, 0.3, 1.0):
            for x in (0.0, 1.0):
                dx = 1e-6
                du = (
                    expr.evaluate(spec.u_exact, {"x": x + dx, "t": t})
                    - expr.evaluate(spec.u_exact, {"x": x - dx, "t": t})
                ) / (2 * dx)
                assert abs(du) < 1e-8


class TestContaminantPreset:
    def test_default_values(self):
        spec = preset_contaminant()
        t = np.linspace(0, 1, 7)
        np.testing.assert_allclose(
            expr.evaluate(spec.kernel_exact, {"t": t}), -np.exp(-t), rtol=1e-14
        )
        assert expr.evaluate(spec.h, {"x": 0.3, "t": 0.2}) == -1.0
        assert expr.evaluate(spec.f, {"x": 0.1, "t": 0.5, "u": 3.0, "p": 9.0, "q": 0.0}) == -3.0

    def test_floor_with_defaults(self):
        spec = preset_contaminant()
        means = abs(
            inner(
                GridFunction.constant(spec.make_grid(32), expr.evaluate(spec.h, {})),
                GridFunction.constant(spec.make_grid(32), 1.0),
            )
        )
        assert means >= spec.omega_floor - 1e-12

    @pytest.mark.parametrize(
        "rho_b,porosity,kr,kd",
        [(1.0, 1.0, 1.0, 1.0), (2.5, 0.4, 3.0, 0.7), (0.8, 1.2, 0.5, -1.5)],
    )
    def test_kernel_at_zero(self, rho_b, porosity, kr, kd):
        spec = preset_contaminant(rho_b=rho_b, porosity=porosity, kr=kr, kd=kd)
        expected = -(rho_b / porosity) * kr**2 * kd
        assert abs(expr.evaluate(spec.kernel_exact, {"t": 0.0}) - expected) < 1e-14 * abs(expected)

    def test_advection_term(self):
        spec = preset_contaminant(v=2.0)
        value = expr.evaluate(spec.f, {"x": 0.0, "t": 0.0, "u": 1.0, "p": 3.0, "q": 0.0})
        assert value == -1.0 - 6.0

    def test_rejects_bad_rates(self):
        with pytest.raises(ValidationError):
            preset_contaminant(kr=0.0)
        with pytest.raises(ValidationError):
            preset_contaminant(kr=-2.0)
        with pytest.raises(ValidationError):
            preset_contaminant(kd=0.0)


class TestSpecValidation:
    def test_bad_horizon(self):
        with pytest.raises(ValidationError):
            ProblemSpec(
                name="bad", extents=(1.0,), T=-1.0, omega_floor=1.0,
                f=expr.parse("0"), h=expr.parse("1"), g=expr.parse("0"), u0=expr.parse("0"),
            )

    def test_bad_floor(self):
        with pytest.raises(ValidationError):
            ProblemSpec(
                name="bad", extents=(1.0,), T=1.0, omega_floor=0.0,
                f=expr.parse("0"), h=expr.parse("1"), g=expr.parse("0"), u0=expr.parse("0"),
            )

    def test_variable_discipline(self):
        # u0 may not depend on time
        with pytest.raises(ValidationError):
            ProblemSpec(
                name="bad", extents=(1.0,), T=1.0, omega_floor=1.0,
                f=expr.parse("0"), h=expr.parse("1"), g=expr.parse("0"), u0=expr.parse("t"),
            )
        # y is off limits in 1D
        with pytest.raises(ValidationError):
            ProblemSpec(
                name="bad", extents=(1.0,), T=1.0, omega_floor=1.0,
                f=expr.parse("y"), h=expr.parse("1"), g=expr.parse("0"), u0=expr.parse("0"),
            )

    def test_floor_violation(self):
        spec = ProblemSpec(
            name="flat", extents=(1.0,), T=1.0, omega_floor=1.0,
            f=expr.parse("0"), h=expr.parse("0"), g=expr.parse("0"), u0=expr.parse("0"),
        )
        with pytest.raises(FloorViolationError):
            validate_floor(spec, spec.make_grid(10), TimeGrid(1.0, 10))

    def test_time_varying_floor_violation(self):
        spec = ProblemSpec(
            name="sinker", extents=(1.0,), T=1.0, omega_floor=0.5,
            f=expr.parse("0"), h=expr.parse("1-2*t"), g=expr.parse("0"), u0=expr.parse("0"),
        )
        with pytest.raises(FloorViolationError):
            validate_floor(spec, spec.make_grid(10), TimeGrid(1.0, 10))


CONFIG = """
# sample problem
[problem]
f = "0"
h = "1"
g = "0"
u0 = "x"
lx = 1.0
T = 2.0
omega = 0.5
m = "exp(-t)"
mprime = "-exp(-t)"

[discretization]
n = 20
mx = 10

[experiment]
mode = reconstruct
"""


class TestConfig:
    def test_parse_sections(self):
        sections = parse_config(CONFIG)
        assert sections["problem"]["f"] == "0"
        assert sections["discretization"]["n"] == "20"
        assert sections["experiment"]["mode"] == "reconstruct"

    def test_load_problem(self):
        loaded = load_problem(CONFIG)
        assert loaded.spec.T == 2.0
        assert loaded.spec.omega_floor == 0.5
        assert loaded.discretization["mx"] == "10"

    def test_load_preset(self):
        loaded = load_problem("[problem]\npreset = manufactured1d\n")
        assert loaded.spec.name == "manufactured1d"

    def test_preset_horizon_override(self):
        loaded = load_problem("[problem]\npreset = manufactured1d\nT = 0.5\n")
        assert loaded.spec.T == 0.5

    def test_negative_horizon_rejected(self):
        with pytest.raises(ValidationError):
            load_problem(CONFIG.replace("T = 2.0", "T = -1"))

    def test_floor_violation_on_load(self):
        with pytest.raises(FloorViolationError):
            load_problem(CONFIG.replace('h = "1"', 'h = "0"'))

    def test_missing_mandatory_key(self):
        with pytest.raises(ConfigError):
            load_problem(CONFIG.replace('f = "0"\n', ""))

    def test_bad_line(self):
        with pytest.raises(ConfigError):
            parse_config("[problem]\nnonsense line\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse_config("[mystery]\nx = 1\n")

    def test_expression_error_carries_key(self):
        with pytest.raises(ConfigError) as err:
            load_problem(CONFIG.replace('u0 = "x"', 'u0 = "x +"'))
        assert "u0" in str(err.value)

    def test_roundtrip_through_config(self):
        spec = preset_manufactured_1d()
        loaded = load_problem(spec.to_config({"n": 10, "mx": 10}))
        again = loaded.spec
        assert again.T == spec.T
        assert again.omega_floor == spec.omega_floor
        assert again.extents == spec.extents
        for key in ("f", "h", "g", "u0", "kernel_exact", "m_exact", "mprime_exact"):
            assert getattr(again, key) == getattr(spec, key)

    def test_contaminant_overrides(self):
        loaded = load_problem(
            "[problem]\npreset = contaminant\nkr = 2.0\nkd = 0.5\ns0 = 3.0\n"
        )
        # h = -s0/(kr kd) = -3
        assert expr.evaluate(loaded.spec.h, {}) == -3.0

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            make_preset("nope")

    def test_spec_from_mapping_requires_lx(self):
        with pytest.raises(ConfigError):
            spec_from_mapping({"f": "0", "h": "1", "g": "0", "u0": "0", "T": "1", "omega": "1"})


class TestMeasurementSeries:
    def test_backward_differences(self):
        tg = TimeGrid(1.0, 4)
        series = MeasurementSeries.from_samples(tg, np.array([0.0, 1.0, 3.0, 6.0, 10.0]))
        np.testing.assert_allclose(series.derivatives, [4.0, 8.0, 12.0, 16.0])
        assert series.provenance == "discrete-difference"
        assert series.m0 == 0.0
        assert series.initial_derivative is None

    def test_from_expressions_analytic(self):
        tg = TimeGrid(1.0, 10)
        spec = preset_manufactured_1d()
        series = MeasurementSeries.from_expressions(tg, spec.m_exact, spec.mprime_exact)
        assert series.provenance == "analytic"
        assert series.initial_derivative == 1.0
        np.testing.assert_allclose(series.values, 1.0 + tg.nodes)
        np.testing.assert_allclose(series.derivatives, 1.0)

    def test_derivative_index_bounds(self):
        tg = TimeGrid(1.0, 3)
        series = MeasurementSeries.from_samples(tg, np.arange(4.0))
        with pytest.raises(IndexError):
            series.derivative_at(0)
        with pytest.raises(IndexError):
            series.derivative_at(4)

    def test_restrict_subsamples(self):
        fine = TimeGrid(1.0, 100)
        series = MeasurementSeries.from_samples(fine, np.sin(fine.nodes))
        coarse = series.restrict(TimeGrid(1.0, 25))
        assert coarse.timegrid.n == 25
        np.testing.assert_array_equal(coarse.values, series.values[::4])
        # derivative is the coarse backward difference, not the fine one
        np.testing.assert_allclose(
            coarse.derivatives, np.diff(series.values[::4]) / coarse.timegrid.tau
        )

    def test_restrict_analytic_keeps_exact_derivatives(self):
        spec = preset_manufactured_1d()
        fine = TimeGrid(1.0, 40)
        series = MeasurementSeries.from_expressions(fine, spec.m_exact, spec.mprime_exact)
        coarse = series.restrict(TimeGrid(1.0, 10))
        assert coarse.provenance == "analytic"
        np.testing.assert_allclose(coarse.derivatives, 1.0)

    def test_restrict_non_divisible(self):
        fine = TimeGrid(1.0, 100)
        series = MeasurementSeries.from_samples(fine, np.zeros(101))
        with pytest.raises(ValidationError):
            series.restrict(TimeGrid(1.0, 33))

    def test_noise_recomputes_differences(self):
        tg = TimeGrid(1.0, 50)
        base = MeasurementSeries.from_expressions(
            tg, expr.parse("1+t"), expr.parse("1")
        )
        noisy = base.with_noise(0.01, np.random.default_rng(0))
        assert noisy.provenance == "discrete-difference"
        np.testing.assert_allclose(noisy.derivatives, np.diff(noisy.values) / tg.tau)
        assert np.abs(noisy.values - base.values).max() < 0.1

    def test_nonfinite_rejected(self):
        tg = TimeGrid(1.0, 2)
        with pytest.raises(ValidationError):
            MeasurementSeries(tg, np.array([0.0, np.nan, 1.0]), np.zeros(2), "analytic")


class TestMeasurementCsv:
    def test_roundtrip(self):
        tg = TimeGrid(1.0, 4)
        text = "t,m,mprime\n" + "\n".join(
            f"{t},{m},{d}" for t, m, d in zip(tg.nodes, [1, 2, 3, 4, 5], [9, 1, 1, 1, 1])
        )
        series = measurement_from_csv(text, tg)
        assert series.provenance == "analytic"
        assert series.initial_derivative == 9.0
        np.testing.assert_allclose(series.values, [1, 2, 3, 4, 5])

    def test_without_derivative_column(self):
        tg = TimeGrid(1.0, 2)
        series = measurement_from_csv("t,m\n0,1\n0.5,2\n1,3\n", tg)
        assert series.provenance == "discrete-difference"
        np.testing.assert_allclose(series.derivatives, [2.0, 2.0])

    def test_time_mismatch(self):
        tg = TimeGrid(1.0, 2)
        with pytest.raises(ValidationError):
            measurement_from_csv("t,m\n0,1\n0.4,2\n1,3\n", tg)

    def test_row_count_mismatch(self):
        tg = TimeGrid(1.0, 3)
        with pytest.raises(ValidationError):
            measurement_from_csv("t,m\n0,1\n0.5,2\n1,3\n", tg)


def test_zero_preset_is_all_zero():
    spec = preset_zero_1d()
    env = {"x": 0.3, "t": 0.7, "u": 0.0, "p": 0.0, "q": 0.0}
    assert expr.evaluate(spec.f, env) == 0.0
    assert expr.evaluate(spec.u0, {"x": 0.3}) == 0.0
    assert expr.evaluate(spec.m_exact, {"t": 0.7}) == 0.0
    assert expr.evaluate(spec.h, {"x": 0.1, "t": 0.2}) == 1.0

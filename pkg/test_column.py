import math

import numpy as np
import pytest
from pydantic import ValidationError

from column import (
    GAS_CONSTANT,
    BoilupRatio,
    ColumnDesign,
    ColumnOperating,
    DistillatePurity,
    DistillateRate,
    PartialCondenser,
    SolverOptions,
    Stream,
    TotalCondenser,
    f_factor,
    solve_column,
)
from errors import InvalidInput
from conftest import ALPHA


def antoine_k(components, T, P):
    return np.array([10.0 ** (r.antoine.A - r.antoine.B / (T + r.antoine.C)) for r in components]) / P


def rachford_rice_temperature(z, beta, P, components, lo=250.0, hi=750.0):
    """Temperature at which an isothermal flash of z vaporizes the fraction beta."""
    def h(T):
        K = antoine_k(components, T, P)
        return float(np.sum(z * (K - 1.0) / (1.0 + beta * (K - 1.0))))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def binary_operating(reflux_ratio, spec, pressure=15.0):
    return ColumnOperating(pressure=pressure, condenser=TotalCondenser(), reflux_ratio=reflux_ratio, bottom_spec=spec)


def test_single_stage_column_is_an_isothermal_flash(components, base_feed):
    design = ColumnDesign(n_stages=1, feed_stage=1, diameter=1.0)
    F = base_feed.total_flow
    op = ColumnOperating(
        pressure=30.0, condenser=TotalCondenser(), reflux_ratio=0.0, bottom_spec=DistillateRate(value=0.4 * F),
    )
    solution = solve_column(design, op, base_feed.restate(30.0), components)
    assert solution.converged, solution.failure

    z = base_feed.composition
    T = rachford_rice_temperature(z, 0.4, 30.0, components)
    K = antoine_k(components, T, 30.0)
    x = z / (1.0 + 0.4 * (K - 1.0))
    np.testing.assert_allclose(solution.bottoms.composition, x / x.sum(), atol=1e-6)
    np.testing.assert_allclose(solution.distillate.composition, K * x / (K * x).sum(), atol=1e-6)
    assert solution.stage_profiles.temperature[0] == pytest.approx(T, abs=1e-4)


def test_binary_total_reflux_matches_fenske(binary, binary_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    solution = solve_column(design, binary_operating(1000.0, DistillateRate(value=50.0)), binary_feed, binary)
    assert solution.converged, solution.failure
    xd = solution.distillate.composition[0]
    xb = solution.bottoms.composition[0]
    stages = math.log((xd / (1.0 - xd)) * ((1.0 - xb) / xb)) / math.log(ALPHA)
    assert stages == pytest.approx(10.0, rel=0.05)


def test_converged_solve_conserves_mass(binary, binary_feed):
    design = ColumnDesign(n_stages=12, feed_stage=6, diameter=1.0)
    solution = solve_column(design, binary_operating(2.0, DistillateRate(value=40.0)), binary_feed, binary)
    assert solution.converged
    F = binary_feed.total_flow
    assert solution.distillate.total_flow + solution.bottoms.total_flow == pytest.approx(F, abs=1e-9 * F)
    closure = binary_feed.component_flows - solution.distillate.component_flows - solution.bottoms.component_flows
    assert np.abs(closure).max() < 1e-6 * F


def test_multicomponent_solve_conserves_mass(components, base_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    F = base_feed.total_flow
    op = ColumnOperating(
        pressure=30.0, condenser=TotalCondenser(), reflux_ratio=2.0, bottom_spec=DistillateRate(value=0.3 * F),
    )
    solution = solve_column(design, op, base_feed.restate(30.0), components)
    assert solution.converged, solution.failure
    closure = base_feed.component_flows - solution.distillate.component_flows - solution.bottoms.component_flows
    assert np.abs(closure).max() < 1e-6 * F


def test_distillate_purity_rises_with_reflux(binary, binary_feed):
    design = ColumnDesign(n_stages=8, feed_stage=4, diameter=1.0)
    purities = []
    for reflux in (0.5, 1.0, 2.0, 4.0, 8.0):
        solution = solve_column(design, binary_operating(reflux, DistillateRate(value=45.0)), binary_feed, binary)
        assert solution.converged
        purities.append(solution.distillate.composition[0])
    assert all(b >= a - 1e-12 for a, b in zip(purities, purities[1:]))


def test_warm_start_gives_the_same_solution(binary, binary_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    op = binary_operating(3.0, DistillateRate(value=50.0))
    cold = solve_column(design, op, binary_feed, binary)
    warm = solve_column(design, op, binary_feed, binary, init=cold)
    assert cold.converged and warm.converged
    np.testing.assert_allclose(warm.distillate.composition, cold.distillate.composition, atol=1e-6)
    np.testing.assert_allclose(warm.bottoms.composition, cold.bottoms.composition, atol=1e-6)
    assert warm.iterations <= cold.iterations


def test_stage_profiles_sit_on_the_bubble_curve(binary, binary_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    solution = solve_column(design, binary_operating(3.0, DistillateRate(value=50.0)), binary_feed, binary)
    profiles = solution.stage_profiles
    for T, x in zip(profiles.temperature, profiles.x):
        assert abs(np.dot(antoine_k(binary, T, 15.0), x) - 1.0) < 1e-7


def test_wide_boiling_column_with_partial_condenser(toy, toy_feed):
    design = ColumnDesign(n_stages=20, feed_stage=10, diameter=0.5)
    op = ColumnOperating(
        pressure=30.0, condenser=PartialCondenser(temperature=290.0), reflux_ratio=1.0,
        bottom_spec=BoilupRatio(value=6.0),
    )
    solution = solve_column(design, op, toy_feed, toy)
    assert solution.converged, solution.failure
    assert solution.residual < 1e-9
    assert 0.0 <= solution.condenser_vapor_fraction <= 0.5
    closure = toy_feed.component_flows - solution.distillate.component_flows - solution.bottoms.component_flows
    assert np.abs(closure).max() < 1e-6 * toy_feed.total_flow


def test_exhausted_evaluation_budget_is_reported_not_raised(toy, toy_feed):
    design = ColumnDesign(n_stages=20, feed_stage=10, diameter=0.5)
    op = ColumnOperating(
        pressure=30.0, condenser=TotalCondenser(), reflux_ratio=1.0, bottom_spec=DistillateRate(value=4.0),
    )
    solution = solve_column(design, op, toy_feed, toy, options=SolverOptions(max_sweeps=1))
    assert not solution.converged
    assert solution.failure_kind == "no_convergence"


def test_boilup_ratio_fixes_the_distillate_rate(binary, binary_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    solution = solve_column(design, binary_operating(2.0, BoilupRatio(value=3.0)), binary_feed, binary)
    assert solution.converged
    assert solution.distillate_rate == pytest.approx(3.0 * 100.0 / (2.0 + 1.0 + 3.0))
    boilup = solution.stage_profiles.vapor[-1]
    assert boilup / solution.bottoms.total_flow == pytest.approx(3.0)


def test_purity_specification_is_met_at_the_largest_distillate(binary, binary_feed):
    design = ColumnDesign(n_stages=10, feed_stage=5, diameter=1.0)
    spec = DistillatePurity(component="light", value=0.99)
    solution = solve_column(design, binary_operating(5.0, spec), binary_feed, binary)
    assert solution.converged, solution.failure
    purity = solution.distillate.composition[0]  # equal molar masses: mass = mole fraction
    assert 0.99 <= purity < 0.99 + 1e-4


def test_unreachable_purity_is_reported_not_raised(binary, binary_feed):
    design = ColumnDesign(n_stages=2, feed_stage=1, diameter=1.0)
    spec = DistillatePurity(component="light", value=0.999)
    solution = solve_column(design, binary_operating(0.1, spec), binary_feed, binary)
    assert not solution.converged
    assert solution.failure_kind == "spec_unattainable"


def test_zero_flow_feed_is_rejected(binary):
    feed = Stream(total_flow=0.0, composition=np.array([0.5, 0.5]), temperature=340.0, pressure=15.0)
    design = ColumnDesign(n_stages=5, feed_stage=3, diameter=1.0)
    with pytest.raises(InvalidInput):
        solve_column(design, binary_operating(1.0, DistillateRate(value=1.0)), feed, binary)


def test_feed_below_last_stage_is_invalid():
    with pytest.raises(ValidationError):
        ColumnDesign(n_stages=5, feed_stage=6, diameter=1.0)


def test_diameter_must_sit_on_the_grid():
    with pytest.raises(ValidationError):
        ColumnDesign(n_stages=5, feed_stage=3, diameter=1.05)


def test_pressure_above_atmospheric_is_rejected():
    with pytest.raises(ValidationError):
        binary_operating(1.0, DistillateRate(value=1.0), pressure=150.0)


def test_f_factor_unit_velocity_and_density():
    T, P = 300.0, 101.325
    M = GAS_CONSTANT * T / (P * 1000.0)  # gives rho = 1 kg/m3
    area = math.pi / 4.0
    flow = 3600.0 * area / M  # kmol/h giving u = 1 m/s
    assert f_factor(flow, np.array([1.0]), T, P, 1.0, np.array([M])) == pytest.approx(1.0, rel=1e-12)


def test_f_factor_scales_with_inverse_area():
    y, M = np.array([1.0]), np.array([93.13])
    narrow = f_factor(100.0, y, 457.0, 101.3, 1.0, M)
    wide = f_factor(100.0, y, 457.0, 101.3, 2.0, M)
    assert wide == pytest.approx(narrow / 4.0, rel=1e-12)


def test_f_factor_of_aniline_vapor_by_hand():
    P_pa, T, M = 101300.0, 457.0, 93.13
    rho = P_pa * M / (8314.46 * T)
    u = (100.0 / 3600.0) * 8314.46 * T / P_pa / (math.pi / 4.0)
    assert rho == pytest.approx(2.48, abs=0.01)
    value = f_factor(100.0, np.array([1.0]), T, 101.3, 1.0, np.array([M]))
    assert value == pytest.approx(u * math.sqrt(rho), rel=1e-6)


def test_f_factor_rejects_zero_diameter():
    with pytest.raises(InvalidInput):
        f_factor(100.0, np.array([1.0]), 400.0, 30.0, 0.0, np.array([93.13]))

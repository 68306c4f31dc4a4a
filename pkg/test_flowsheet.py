import numpy as np
import pytest

from column import Stream
from errors import DesignOutOfBounds, InvalidInput
from scenarios import find_scenario, to_feed_stream
from flowsheet import (
    DesignBounds,
    OperatingBounds,
    OperatingPoint,
    TrainDesign,
    TrainSolution,
    check_specs,
    initialize_train,
    sharp_split,
    simulate_train,
)


def spec_solution(feed, purity=0.9951, reboiler=450.0, max_f=(1.0, 1.0, 1.0), min_f=(1.0, 1.0, 1.0)):
    return TrainSolution(
        feed=feed,
        product_purity=purity,
        reboiler_temperatures=(reboiler, 400.0, 400.0),
        max_f_factors=max_f,
        min_f_factors=min_f,
        feasible=True,
    )


def test_purity_just_above_spec_is_not_a_violation(flowsheet_config, base_feed):
    assert check_specs(spec_solution(base_feed, purity=0.9951), flowsheet_config) == []


def test_purity_shortfall_is_quantified(flowsheet_config, base_feed):
    violations = check_specs(spec_solution(base_feed, purity=0.990), flowsheet_config)
    assert [v.kind for v in violations] == ["purity"]
    assert violations[0].magnitude == pytest.approx(0.005, abs=1e-12)


def test_f_factor_above_band_names_the_column(flowsheet_config, base_feed):
    violations = check_specs(spec_solution(base_feed, max_f=(1.0, 3.1, 1.0)), flowsheet_config)
    assert len(violations) == 1
    assert violations[0].kind == "f_factor_high"
    assert violations[0].column == 2
    assert violations[0].magnitude == pytest.approx(0.6)


def test_f_factor_below_band_is_a_violation_too(flowsheet_config, base_feed):
    violations = check_specs(spec_solution(base_feed, min_f=(1.0, 1.0, 0.2)), flowsheet_config)
    assert [(v.kind, v.column) for v in violations] == [("f_factor_low", 3)]


def test_hot_column_one_reboiler_is_a_violation(flowsheet_config, base_feed):
    violations = check_specs(spec_solution(base_feed, reboiler=483.15), flowsheet_config)
    assert [v.kind for v in violations] == ["temperature"]
    assert violations[0].magnitude == pytest.approx(10.0)


def test_failed_solution_reports_a_convergence_violation(flowsheet_config, base_feed):
    failed = TrainSolution(feed=base_feed, feasible=False, failed_column=2, diagnostics=("column 2: stalled",))
    violations = check_specs(failed, flowsheet_config)
    assert violations[0].kind == "convergence"
    assert violations[0].column == 2


def test_sharp_split_sends_all_heavies_to_column_one_bottoms(components, base_feed):
    col1, col2, col3 = sharp_split(base_feed, components)
    heavies = components.class_mask("high")
    fed = base_feed.component_flows[heavies].sum()
    assert col1.bottoms[heavies].sum() >= 0.99 * fed
    np.testing.assert_allclose(col1.distillate + col1.bottoms, base_feed.component_flows)
    np.testing.assert_allclose(col2.distillate + col2.bottoms, col1.distillate)
    assert col3.distillate[components.product_index] == pytest.approx(
        base_feed.component_flows[components.product_index]
    )


def test_zero_flow_feed_is_rejected_before_any_solve(components, robust_design, flowsheet_config):
    feed = Stream(total_flow=0.0, composition=np.full(len(components), 0.1), temperature=400.0, pressure=30.0)
    op = OperatingPoint(reflux_ratio_c1=1, boilup_ratio_c1=6.6, reflux_ratio_c2=2, boilup_ratio_c2=1.44,
                        reflux_ratio_c3=3)
    with pytest.raises(InvalidInput):
        simulate_train(robust_design, op, feed, components, flowsheet_config)


def test_design_bounds_accept_the_robust_design(robust_design):
    DesignBounds().validate_design(robust_design)


@pytest.mark.parametrize("columns", [
    ({"n_stages": 41, "feed_stage": 20, "diameter": 1.0},),
    ({"n_stages": 40, "feed_stage": 39, "diameter": 1.0},),
    ({"n_stages": 20, "feed_stage": 19, "diameter": 1.0},),
    ({"n_stages": 40, "feed_stage": 20, "diameter": 3.1},),
])
def test_design_bounds_reject(columns):
    design = TrainDesign(columns=columns + (
        {"n_stages": 25, "feed_stage": 15, "diameter": 0.7},
        {"n_stages": 60, "feed_stage": 30, "diameter": 1.0},
    ))
    with pytest.raises(DesignOutOfBounds):
        DesignBounds().validate_design(design)


def test_operating_point_array_order():
    op = OperatingPoint(reflux_ratio_c1=1, boilup_ratio_c1=2, reflux_ratio_c2=3, boilup_ratio_c2=4,
                        reflux_ratio_c3=5)
    np.testing.assert_array_equal(op.as_array(), [1, 2, 3, 4, 5])
    assert OperatingPoint.from_array(op.as_array()) == op


def test_operating_bounds_clip_and_contain():
    bounds = OperatingBounds()
    op = OperatingPoint(reflux_ratio_c1=50, boilup_ratio_c1=0.0, reflux_ratio_c2=3, boilup_ratio_c2=4,
                        reflux_ratio_c3=5)
    assert not bounds.contains(op)
    clipped = bounds.clip(op)
    assert bounds.contains(clipped)
    assert clipped.reflux_ratio_c1 == 20.0
    assert clipped.boilup_ratio_c1 == 0.1


def test_initialized_train_closes_the_balance(toy, toy_feed, toy_design, toy_flowsheet):
    init = initialize_train(toy_design, toy_feed, toy, toy_flowsheet)
    solution = simulate_train(toy_design, init.operating, toy_feed, toy, toy_flowsheet, init.warm_starts)
    assert solution.feasible, solution.diagnostics
    assert solution.balance_residual() < 1e-6 * toy_feed.total_flow
    assert solution.product_purity >= toy_flowsheet.product_purity - 1e-6
    assert not [v for v in check_specs(solution, toy_flowsheet) if v.kind == "purity"]


def test_initialization_is_deterministic(toy, toy_feed, toy_design, toy_flowsheet):
    first = initialize_train(toy_design, toy_feed, toy, toy_flowsheet)
    second = initialize_train(toy_design, toy_feed, toy, toy_flowsheet)
    assert first.operating == second.operating
    for a, b in zip(first.warm_starts, second.warm_starts):
        np.testing.assert_array_equal(a.stage_profiles.temperature, b.stage_profiles.temperature)
        np.testing.assert_array_equal(a.distillate.composition, b.distillate.composition)


def test_simulation_is_deterministic(toy, toy_feed, toy_design, toy_flowsheet):
    op = initialize_train(toy_design, toy_feed, toy, toy_flowsheet).operating
    first = simulate_train(toy_design, op, toy_feed, toy, toy_flowsheet)
    second = simulate_train(toy_design, op, toy_feed, toy, toy_flowsheet)
    assert first.feasible == second.feasible
    if first.feasible:
        np.testing.assert_array_equal(first.product.composition, second.product.composition)
        assert first.total_reboiler_duty == second.total_reboiler_duty


def test_train_outlets_report_mass_flows(toy, toy_feed, toy_design, toy_flowsheet):
    init = initialize_train(toy_design, toy_feed, toy, toy_flowsheet)
    solution = simulate_train(toy_design, init.operating, toy_feed, toy, toy_flowsheet, init.warm_starts)
    total = (solution.product_mass_flow + solution.waste_mass_flow + solution.midboiler_mass_flow)
    assert total == pytest.approx(toy_feed.mass_flow(toy), rel=1e-6)
    assert len(solution.max_f_factors) == 3
    assert solution.total_reboiler_duty > 0



@pytest.mark.parametrize("scenario_id", ["base", "sc1", "sc2", "sc3", "sc4", "sc5", "sc6"])
def test_robust_design_initializes_in_every_scenario(scenario_id, components, scenarios, robust_design,
                                                     flowsheet_config):
    feed = to_feed_stream(find_scenario(scenarios, scenario_id), components)
    init = initialize_train(robust_design, feed, components, flowsheet_config)
    assert all(warm.converged for warm in init.warm_starts)
    assert all(warm.residual < 1e-9 for warm in init.warm_starts)
    assert flowsheet_config.operating_bounds.contains(init.operating)


@pytest.mark.slow
def test_robust_design_base_scenario(components, base_feed, robust_design, flowsheet_config):
    init = initialize_train(robust_design, base_feed, components, flowsheet_config)
    solution = simulate_train(robust_design, init.operating, base_feed, components, flowsheet_config,
                              init.warm_starts)
    assert solution.feasible, solution.diagnostics
    assert solution.balance_residual() < 1e-6 * base_feed.total_flow
    aniline = components.product_index
    recovery = solution.product.component_flows[aniline] / base_feed.component_flows[aniline]
    assert recovery > 0.5


@pytest.mark.slow
def test_conservation_over_randomized_inputs(components, scenarios, flowsheet_config):
    rng = np.random.default_rng(2024)
    bounds = DesignBounds()
    feasible = 0
    for _ in range(5000):
        columns = []
        for column in bounds.columns:
            n = int(rng.integers(column.n_stages[0], column.n_stages[1] + 1))
            f = int(rng.integers(column.feed_stage[0], max(column.feed_stage[0], n - 2) + 1))
            d = round(float(rng.integers(5, 31)) / 10.0, 1)
            columns.append({"n_stages": n, "feed_stage": min(f, n), "diameter": d})
        design = TrainDesign(columns=tuple(columns))
        scenario = scenarios[int(rng.integers(len(scenarios)))]
        feed = to_feed_stream(scenario, components)
        op = OperatingPoint(
            reflux_ratio_c1=rng.uniform(0.5, 5), boilup_ratio_c1=rng.uniform(2, 12),
            reflux_ratio_c2=rng.uniform(0.5, 5), boilup_ratio_c2=rng.uniform(0.5, 4),
            reflux_ratio_c3=rng.uniform(2, 20),
        )
        solution = simulate_train(design, op, feed, components, flowsheet_config)
        if solution.feasible:
            feasible += 1
            assert solution.balance_residual() < 1e-6 * feed.total_flow
            if feasible == 500:
                break
    assert feasible == 500

"""
Per-scenario continuous search over the operating point of a fixed design.

Constraints are folded into an exact-penalty merit
    profit - sum(weight_kind * violation)
and the search runs in box-normalized coordinates with scipy.optimize.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize

from column import ColumnSolution
from economics import EconParams, annual_profit
from errors import AllEvaluationsFailed, InvalidInput
from flowsheet import (
    FlowsheetConfig,
    OperatingBounds,
    OperatingPoint,
    SpecViolation,
    TrainDesign,
    TrainSolution,
    check_specs,
    simulate_train,
)
from scenarios import Scenario, to_feed_stream
from thermo import ComponentSet

logger = logging.getLogger(__name__)


class PenaltyWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    purity: float = Field(1e9, gt=0)  # EUR/y per unit mass fraction
    temperature: float = Field(1e5, gt=0)  # EUR/y per K
    f_factor: float = Field(1e6, gt=0)  # EUR/y per Pa^0.5


class SearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["nelder-mead", "l-bfgs-b"] = "nelder-mead"
    bounds: OperatingBounds = Field(default_factory=OperatingBounds)
    max_evaluations: int = Field(200, ge=1)
    xtol: float = Field(1e-4, gt=0)  # in box-normalized coordinates
    ftol: float = Field(1e-6, gt=0)  # in scaled merit
    initial_step: float = Field(0.05, gt=0, le=0.5)  # simplex edge, box-normalized
    fd_step: float = Field(1e-3, gt=0)  # finite-difference step for l-bfgs-b
    purity_tolerance: float = Field(1e-6, gt=0)
    temperature_tolerance: float = Field(1e-3, gt=0)  # K
    f_factor_tolerance: float = Field(1e-4, gt=0)
    penalty_weights: PenaltyWeights = Field(default_factory=PenaltyWeights)
    failure_merit: float = -1e8  # EUR/y for a point whose simulation failed
    objective_scale: float = Field(1e6, gt=0)

    def tolerance(self, kind: str) -> float:
        if kind == "purity":
            return self.purity_tolerance
        if kind == "temperature":
            return self.temperature_tolerance
        return self.f_factor_tolerance

    def weight(self, kind: str) -> float:
        if kind == "purity":
            return self.penalty_weights.purity
        if kind == "temperature":
            return self.penalty_weights.temperature
        return self.penalty_weights.f_factor


@dataclass(frozen=True)
class Assessment:
    """What one simulation says about an operating point. `profit` is None when it failed."""
    profit: Optional[float]
    violations: Tuple[SpecViolation, ...] = ()
    solution: Optional[TrainSolution] = None

    def is_feasible(self, cfg: SearchConfig) -> bool:
        return self.profit is not None and all(
            v.magnitude <= cfg.tolerance(v.kind) for v in self.violations
        )

    def merit(self, cfg: SearchConfig) -> float:
        if self.profit is None:
            return cfg.failure_merit
        return self.profit - sum(cfg.weight(v.kind) * v.magnitude for v in self.violations)


Objective = Callable[[OperatingPoint], Assessment]


@dataclass(frozen=True)
class SimulationContext:
    components: ComponentSet
    flowsheet: FlowsheetConfig
    econ: EconParams


class TrainObjective:
    """Simulates the train for one (design, scenario); each converged solve warm-starts the next."""

    def __init__(self, design: TrainDesign, scenario: Scenario, context: SimulationContext,
                 warm_starts: Optional[Sequence[ColumnSolution]] = None):
        self.design = design
        self.context = context
        self.feed = to_feed_stream(scenario, context.components)
        self.warm_starts = list(warm_starts) if warm_starts is not None else None
        self.simulations = 0

    def __call__(self, op: OperatingPoint) -> Assessment:
        context = self.context
        self.simulations += 1
        solution = simulate_train(
            self.design, op, self.feed, context.components, context.flowsheet, self.warm_starts,
        )
        violations = tuple(check_specs(solution, context.flowsheet))
        if not solution.feasible:
            return Assessment(None, violations, solution)
        self.warm_starts = list(solution.columns)
        return Assessment(annual_profit(solution, self.design, context.econ), violations, solution)


class ScenarioOutcome(BaseModel):
    """Serializable summary of one scenario search, for reports, caches and checkpoints."""

    scenario_id: str
    feasible: bool
    profit: Optional[float] = None
    operating: Optional[Dict[str, float]] = None
    evaluations: int = 0
    violations: List[Dict] = Field(default_factory=list)
    message: str = ""


@dataclass(frozen=True)
class SearchResult:
    best_point: OperatingPoint
    best_profit: Optional[float]
    feasible: bool
    evaluations_used: int
    violations: Tuple[SpecViolation, ...] = ()
    message: str = ""
    solution: Optional[TrainSolution] = field(default=None, compare=False, repr=False)

    @property
    def constraint_residuals(self) -> Dict[str, float]:
        residuals: Dict[str, float] = {}
        for v in self.violations:
            key = v.kind if v.column is None else f"{v.kind}_c{v.column}"
            residuals[key] = max(residuals.get(key, 0.0), v.magnitude)
        return residuals

    def outcome(self, scenario_id: str) -> ScenarioOutcome:
        return ScenarioOutcome(
            scenario_id=scenario_id,
            feasible=self.feasible,
            profit=self.best_profit,
            operating=self.best_point.model_dump(),
            evaluations=self.evaluations_used,
            violations=[
                {"kind": v.kind, "column": v.column, "magnitude": v.magnitude, "detail": v.detail}
                for v in self.violations
            ],
            message=self.message,
        )


class _BudgetExhausted(Exception):
    pass


class _SearchState:
    def __init__(self, objective: Objective, cfg: SearchConfig):
        self.objective = objective
        self.cfg = cfg
        self.lower, self.upper = cfg.bounds.arrays()
        self.span = self.upper - self.lower
        self.evaluations = 0
        self.seen: Dict[Tuple[float, ...], float] = {}
        self.best_feasible: Optional[Tuple[float, OperatingPoint, Assessment]] = None
        self.best_any: Optional[Tuple[float, OperatingPoint, Assessment]] = None
        self.failures = 0

    def point(self, u: np.ndarray) -> OperatingPoint:
        return OperatingPoint.from_array(self.lower + u * self.span)

    def __call__(self, u: np.ndarray) -> float:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        key = tuple(u.round(12))
        if key in self.seen:
            return self.seen[key]
        if self.evaluations >= self.cfg.max_evaluations:
            raise _BudgetExhausted()

        op = self.point(u)
        assert self.cfg.bounds.contains(op), f"search left the operating box at {op}"
        assessment = self.objective(op)
        self.evaluations += 1
        merit = assessment.merit(self.cfg)
        if assessment.profit is None:
            self.failures += 1
        if self.best_any is None or merit > self.best_any[0]:
            self.best_any = (merit, op, assessment)
        if assessment.is_feasible(self.cfg) and (
            self.best_feasible is None or assessment.profit > self.best_feasible[0]
        ):
            self.best_feasible = (assessment.profit, op, assessment)

        value = -merit / self.cfg.objective_scale
        self.seen[key] = value
        return value


def _initial_simplex(u0: np.ndarray, step: float) -> np.ndarray:
    simplex = [u0]
    for i in range(len(u0)):
        vertex = u0.copy()
        vertex[i] = u0[i] + step if u0[i] + step <= 1.0 else u0[i] - step
        simplex.append(vertex)
    return np.array(simplex)


def search(objective: Objective, cfg: SearchConfig, x0: OperatingPoint) -> SearchResult:
    """Bounded penalty search from x0. x0 is always evaluated first."""
    if not cfg.bounds.contains(x0):
        raise InvalidInput(f"start point {x0} outside the operating bounds")
    state = _SearchState(objective, cfg)
    u0 = (x0.as_array() - state.lower) / state.span
    box = [(0.0, 1.0)] * len(u0)
    message = "converged"

    try:
        state(u0)
        if cfg.method == "nelder-mead":
            result = minimize(
                state, u0, method="Nelder-Mead", bounds=box,
                options={
                    "maxfev": cfg.max_evaluations,
                    "xatol": cfg.xtol,
                    "fatol": cfg.ftol,
                    "initial_simplex": _initial_simplex(u0, cfg.initial_step),
                    "adaptive": True,
                },
            )
        else:
            result = minimize(
                state, u0, method="L-BFGS-B", bounds=box,
                options={"maxfun": cfg.max_evaluations, "eps": cfg.fd_step, "ftol": cfg.ftol},
            )
        if not result.success:
            message = str(result.message)
    except _BudgetExhausted:
        message = f"evaluation budget of {cfg.max_evaluations} exhausted"

    if state.failures == state.evaluations:
        error = AllEvaluationsFailed(f"all {state.evaluations} simulations failed")
        logger.debug("Search failed: %s", error.detail)
        return SearchResult(
            best_point=x0, best_profit=None, feasible=False, evaluations_used=state.evaluations,
            message=error.detail,
        )

    if state.best_feasible is not None:
        profit, point, assessment = state.best_feasible
        feasible = True
    else:
        _, point, assessment = state.best_any
        profit, feasible = assessment.profit, False
    logger.debug("Search finished after %d evaluations: %s", state.evaluations, message)
    return SearchResult(
        best_point=point,
        best_profit=profit,
        feasible=feasible,
        evaluations_used=state.evaluations,
        violations=assessment.violations,
        message=message,
        solution=assessment.solution,
    )


def optimize_operating(design: TrainDesign, scenario: Scenario, cfg: SearchConfig, x0: OperatingPoint,
                       context: SimulationContext,
                       warm_starts: Optional[Sequence[ColumnSolution]] = None) -> SearchResult:
    """Best operating point of `design` for one scenario, starting from x0."""
    objective = TrainObjective(design, scenario, context, warm_starts)
    return search(objective, cfg, cfg.bounds.clip(x0))

"""
Three-column train: heavies leave column 1 bottoms, lights leave column 2 top,
the product leaves column 3 top and the remaining mid boilers column 3 bottoms.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from column import (
    ATMOSPHERIC,
    BoilupRatio,
    ColumnDesign,
    ColumnOperating,
    ColumnSolution,
    DistillatePurity,
    PartialCondenser,
    SolverOptions,
    StageProfiles,
    Stream,
    TotalCondenser,
    solve_column,
)
from errors import DesignOutOfBounds, InitializationFailed, InvalidInput, OptimizerError
from thermo import ComponentSet, bubble_point

logger = logging.getLogger(__name__)

N_COLUMNS = 3


class ColumnBounds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_stages: Tuple[int, int]
    feed_stage: Tuple[int, int]
    diameter: Tuple[float, float] = (0.5, 3.0)  # m

    @field_validator("n_stages", "feed_stage", "diameter")
    @classmethod
    def ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"lower bound above upper bound in {value}")
        return value


def _default_column_bounds() -> Tuple[ColumnBounds, ColumnBounds, ColumnBounds]:
    return (
        ColumnBounds(n_stages=(5, 40), feed_stage=(3, 38)),
        ColumnBounds(n_stages=(5, 40), feed_stage=(3, 38)),
        ColumnBounds(n_stages=(10, 60), feed_stage=(5, 58)),
    )


class DesignBounds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    columns: Tuple[ColumnBounds, ColumnBounds, ColumnBounds] = Field(default_factory=_default_column_bounds)
    feed_margin: int = Field(2, ge=0)  # feed stage at most n_stages - feed_margin
    diameter_step: float = Field(0.1, gt=0)

    def validate_design(self, design: "TrainDesign") -> None:
        for number, (column, bounds) in enumerate(zip(design.columns, self.columns), start=1):
            checks = (
                ("n_stages", column.n_stages, bounds.n_stages),
                ("feed_stage", column.feed_stage, bounds.feed_stage),
                ("diameter", column.diameter, bounds.diameter),
            )
            for name, value, (lo, hi) in checks:
                if not lo - 1e-9 <= value <= hi + 1e-9:
                    raise DesignOutOfBounds(f"column {number}: {name}={value} outside [{lo}, {hi}]")
            if column.feed_stage > column.n_stages - self.feed_margin:
                raise DesignOutOfBounds(
                    f"column {number}: feed stage {column.feed_stage} must be at most "
                    f"{column.n_stages - self.feed_margin} for {column.n_stages} stages"
                )


class TrainDesign(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    columns: Tuple[ColumnDesign, ColumnDesign, ColumnDesign]
    pressures: Tuple[float, float, float] = (30.0, 30.0, 20.0)  # kPa

    @field_validator("pressures")
    @classmethod
    def below_atmospheric(cls, value):
        for p in value:
            if not 0 < p < ATMOSPHERIC:
                raise ValueError(f"column pressure {p} kPa must lie in (0, {ATMOSPHERIC})")
        return value

    def key(self) -> Tuple:
        genes = tuple(
            (c.n_stages, c.feed_stage, int(round(c.diameter * 10))) for c in self.columns
        )
        return genes + (self.pressures,)


class OperatingPoint(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    reflux_ratio_c1: float = Field(..., ge=0)
    boilup_ratio_c1: float = Field(..., ge=0)
    reflux_ratio_c2: float = Field(..., ge=0)
    boilup_ratio_c2: float = Field(..., ge=0)
    reflux_ratio_c3: float = Field(..., ge=0)

    @classmethod
    def field_order(cls) -> List[str]:
        return list(cls.model_fields)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.field_order()])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "OperatingPoint":
        return cls(**{name: float(v) for name, v in zip(cls.field_order(), values)})


class OperatingBounds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    reflux_ratio: Tuple[float, float] = (0.1, 20.0)
    boilup_ratio: Tuple[float, float] = (0.1, 30.0)

    @model_validator(mode="after")
    def finite_box(self):
        for lo, hi in (self.reflux_ratio, self.boilup_ratio):
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo < hi):
                raise ValueError(f"operating bounds ({lo}, {hi}) must be finite with 0 <= lower < upper")
        return self

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [
            self.reflux_ratio if name.startswith("reflux") else self.boilup_ratio
            for name in OperatingPoint.field_order()
        ]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def clip(self, point: OperatingPoint) -> OperatingPoint:
        lower, upper = self.arrays()
        return OperatingPoint.from_array(np.clip(point.as_array(), lower, upper))

    def contains(self, point: OperatingPoint) -> bool:
        lower, upper = self.arrays()
        values = point.as_array()
        return bool(((values >= lower - 1e-12) & (values <= upper + 1e-12)).all())


class FlowsheetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pressures: Tuple[float, float, float] = (30.0, 30.0, 20.0)  # kPa
    condenser_temperatures: Tuple[float, float] = (318.15, 318.15)  # K, columns 1 and 2
    product_component: str = "aniline"
    product_purity: float = Field(0.995, gt=0, lt=1)  # mass fraction
    degradation_temperature: float = Field(473.15, gt=0)  # K, column 1 reboiler ceiling
    f_factor_bands: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]] = (
        (0.5, 2.5), (0.5, 2.5), (0.5, 2.5),
    )
    operating_bounds: OperatingBounds = Field(default_factory=OperatingBounds)
    initial_reflux_ratios: Tuple[float, float, float] = (1.0, 2.0, 3.0)
    max_sweeps: int = Field(500, ge=1)

    @field_validator("pressures")
    @classmethod
    def below_atmospheric(cls, value):
        for p in value:
            if not 0 < p < ATMOSPHERIC:
                raise ValueError(f"column pressure {p} kPa must lie in (0, {ATMOSPHERIC})")
        return value

    @field_validator("f_factor_bands")
    @classmethod
    def ordered_bands(cls, value):
        for lo, hi in value:
            if not 0 <= lo < hi:
                raise ValueError(f"F-factor band ({lo}, {hi}) must satisfy 0 <= lower < upper")
        return value

    def column_operating(
        self, op: OperatingPoint, pressures: Optional[Sequence[float]] = None
    ) -> Tuple[ColumnOperating, ColumnOperating, ColumnOperating]:
        p1, p2, p3 = self.pressures if pressures is None else pressures
        t1, t2 = self.condenser_temperatures
        return (
            ColumnOperating(
                pressure=p1, condenser=PartialCondenser(temperature=t1),
                reflux_ratio=op.reflux_ratio_c1, bottom_spec=BoilupRatio(value=op.boilup_ratio_c1),
            ),
            ColumnOperating(
                pressure=p2, condenser=PartialCondenser(temperature=t2),
                reflux_ratio=op.reflux_ratio_c2, bottom_spec=BoilupRatio(value=op.boilup_ratio_c2),
            ),
            ColumnOperating(
                pressure=p3, condenser=TotalCondenser(), reflux_ratio=op.reflux_ratio_c3,
                bottom_spec=DistillatePurity(component=self.product_component, value=self.product_purity),
            ),
        )

    def solver_options(self) -> SolverOptions:
        return SolverOptions(max_sweeps=self.max_sweeps)


@dataclass(frozen=True)
class TrainSolution:
    feed: Stream
    columns: Tuple[ColumnSolution, ...] = ()
    product: Optional[Stream] = None
    waste_heavy: Optional[Stream] = None
    waste_light: Optional[Stream] = None
    midboiler_out: Optional[Stream] = None
    total_reboiler_duty: float = 0.0  # kW
    total_condenser_duty: float = 0.0  # kW
    product_purity: float = 0.0  # mass fraction
    max_f_factors: Tuple[float, ...] = ()
    min_f_factors: Tuple[float, ...] = ()
    reboiler_temperatures: Tuple[float, ...] = ()
    product_mass_flow: float = 0.0  # kg/h
    waste_heavy_mass_flow: float = 0.0
    waste_light_mass_flow: float = 0.0
    midboiler_mass_flow: float = 0.0
    feasible: bool = False
    failed_column: Optional[int] = None
    diagnostics: Tuple[str, ...] = ()

    @property
    def waste_mass_flow(self) -> float:
        return self.waste_heavy_mass_flow + self.waste_light_mass_flow

    @property
    def outlets(self) -> List[Tuple[str, Optional[Stream]]]:
        return [
            ("product", self.product),
            ("waste_heavy", self.waste_heavy),
            ("waste_light", self.waste_light),
            ("midboiler_out", self.midboiler_out),
        ]

    def balance_residual(self) -> float:
        """Largest per-component imbalance between feed and outlets, kmol/h."""
        if not self.feasible:
            return float("nan")
        out = sum(stream.component_flows for _, stream in self.outlets)
        return float(np.abs(self.feed.component_flows - out).max())


@dataclass(frozen=True)
class SpecViolation:
    kind: str  # purity | temperature | f_factor_high | f_factor_low | convergence
    magnitude: float
    column: Optional[int] = None
    detail: str = ""


def _check_feed(feed: Stream, components: ComponentSet) -> None:
    if not feed.total_flow > 0:
        raise InvalidInput("feed stream has zero flow")
    if len(feed.composition) != len(components):
        raise InvalidInput(
            f"feed has {len(feed.composition)} components, component set has {len(components)}"
        )


def _infeasible(feed: Stream, solved: List[ColumnSolution], column: int, reason: str) -> TrainSolution:
    logger.warning("Column %d did not converge: %s", column, reason)
    return TrainSolution(
        feed=feed, columns=tuple(solved), feasible=False, failed_column=column,
        diagnostics=(f"column {column}: {reason}",),
    )


def simulate_train(design: TrainDesign, op: OperatingPoint, feed: Stream, components: ComponentSet,
                   cfg: FlowsheetConfig,
                   warm_starts: Optional[Sequence[Optional[ColumnSolution]]] = None) -> TrainSolution:
    """
    Solve the three columns in sequence. Convergence failures give an
    infeasible TrainSolution carrying the failing column and its reason.
    """
    _check_feed(feed, components)
    warm_starts = list(warm_starts) if warm_starts is not None else [None] * N_COLUMNS
    operating = cfg.column_operating(op, design.pressures)
    options = cfg.solver_options()

    solved: List[ColumnSolution] = []
    column_feed = feed.restate(design.pressures[0])
    for k in range(N_COLUMNS):
        solution = solve_column(
            design.columns[k], operating[k], column_feed, components, init=warm_starts[k], options=options,
        )
        solved.append(solution)
        if not solution.converged:
            return _infeasible(feed, solved, k + 1, solution.failure or "unknown failure")
        if k == 0:
            column_feed = solution.distillate.restate(design.pressures[1])
        elif k == 1:
            column_feed = solution.bottoms.restate(design.pressures[2])

    c1, c2, c3 = solved
    product = c3.distillate
    purity = float(components.mass_fractions(product.composition)[components.index(cfg.product_component)])
    return TrainSolution(
        feed=feed,
        columns=tuple(solved),
        product=product,
        waste_heavy=c1.bottoms,
        waste_light=c2.distillate,
        midboiler_out=c3.bottoms,
        total_reboiler_duty=sum(c.reboiler_duty for c in solved),
        total_condenser_duty=sum(c.condenser_duty for c in solved),
        product_purity=purity,
        max_f_factors=tuple(c.max_f_factor for c in solved),
        min_f_factors=tuple(c.min_f_factor for c in solved),
        reboiler_temperatures=tuple(c.reboiler_temperature for c in solved),
        product_mass_flow=product.mass_flow(components),
        waste_heavy_mass_flow=c1.bottoms.mass_flow(components),
        waste_light_mass_flow=c2.distillate.mass_flow(components),
        midboiler_mass_flow=c3.bottoms.mass_flow(components),
        feasible=True,
    )


def check_specs(sol: TrainSolution, cfg: FlowsheetConfig) -> List[SpecViolation]:
    """Quantified specification violations; empty means spec-feasible."""
    if not sol.feasible:
        return [SpecViolation("convergence", float("inf"), sol.failed_column, "; ".join(sol.diagnostics))]

    violations = []
    shortfall = cfg.product_purity - sol.product_purity
    if shortfall > 0:
        violations.append(SpecViolation(
            "purity", shortfall, 3, f"{cfg.product_component} purity {sol.product_purity:.6f}",
        ))
    overheat = sol.reboiler_temperatures[0] - cfg.degradation_temperature
    if overheat > 0:
        violations.append(SpecViolation(
            "temperature", overheat, 1, f"reboiler at {sol.reboiler_temperatures[0]:.2f} K",
        ))
    for k, ((lo, hi), high, low) in enumerate(zip(cfg.f_factor_bands, sol.max_f_factors, sol.min_f_factors), start=1):
        if high > hi:
            violations.append(SpecViolation("f_factor_high", high - hi, k, f"F-factor {high:.3f} above {hi}"))
        if low < lo:
            violations.append(SpecViolation("f_factor_low", lo - low, k, f"F-factor {low:.3f} below {lo}"))
    return violations


@dataclass(frozen=True)
class SplitEstimate:
    """Component flows (kmol/h) of one column's products under a sharp split."""
    distillate: np.ndarray
    bottoms: np.ndarray

    @property
    def distillate_rate(self) -> float:
        return float(self.distillate.sum())

    @property
    def bottoms_rate(self) -> float:
        return float(self.bottoms.sum())


def sharp_split(feed: Stream, components: ComponentSet) -> Tuple[SplitEstimate, SplitEstimate, SplitEstimate]:
    """
    Configuration-mode estimate: heavies down in column 1, lights up in
    column 2, the product up in column 3.
    """
    flows = feed.component_flows
    high = components.class_mask("high")
    low = components.class_mask("low")
    product = np.zeros(len(components), dtype=bool)
    product[components.product_index] = True

    col1 = SplitEstimate(distillate=np.where(high, 0.0, flows), bottoms=np.where(high, flows, 0.0))
    col2 = SplitEstimate(
        distillate=np.where(low, col1.distillate, 0.0), bottoms=np.where(low, 0.0, col1.distillate),
    )
    col3 = SplitEstimate(
        distillate=np.where(product, col2.bottoms, 0.0), bottoms=np.where(product, 0.0, col2.bottoms),
    )
    return col1, col2, col3


def _section_profile(design: ColumnDesign, split: SplitEstimate, components: ComponentSet,
                     pressure: float) -> ColumnSolution:
    """Constant-composition sections: distillate liquid above the feed, bottoms liquid from it down."""
    eps = 1e-12
    x_top = (split.distillate + eps) / (split.distillate + eps).sum()
    x_bottom = (split.bottoms + eps) / (split.bottoms + eps).sum()
    t_top, y_top = bubble_point(x_top, pressure, components)
    t_bottom, y_bottom = bubble_point(x_bottom, pressure, components)
    n, f = design.n_stages, design.feed_stage - 1
    above = np.arange(n) < f
    profiles = StageProfiles(
        temperature=np.where(above, t_top, t_bottom),
        x=np.where(above[:, None], x_top, x_bottom),
        y=np.where(above[:, None], y_top, y_bottom),
        liquid=np.zeros(n),
        vapor=np.zeros(n),
    )
    return ColumnSolution(
        design=design, converged=False, stage_profiles=profiles,
        distillate_rate=split.distillate_rate,
    )


@dataclass(frozen=True)
class TrainInitialization:
    operating: OperatingPoint
    warm_starts: Tuple[ColumnSolution, ColumnSolution, ColumnSolution]
    splits: Tuple[SplitEstimate, SplitEstimate, SplitEstimate] = field(repr=False, default=())


def initialize_train(design: TrainDesign, feed: Stream, components: ComponentSet,
                     cfg: FlowsheetConfig) -> TrainInitialization:
    """
    Starting operating point and converged per-column warm starts.

    Sharp-split estimates fix the boilup ratios and seed constant-composition
    profiles; each column then gets one full solve. Column 3 reflux is
    doubled until the purity specification is reachable.
    """
    _check_feed(feed, components)
    bounds = cfg.operating_bounds
    splits = sharp_split(feed, components)
    r1, r2, r3 = cfg.initial_reflux_ratios
    bu_lo, bu_hi = bounds.boilup_ratio

    def boilup(reflux: float, split: SplitEstimate) -> float:
        if split.bottoms_rate <= 0:
            return bu_hi
        return float(np.clip((reflux + 1.0) * split.distillate_rate / split.bottoms_rate, bu_lo, bu_hi))

    operating = bounds.clip(OperatingPoint(
        reflux_ratio_c1=r1, boilup_ratio_c1=boilup(r1, splits[0]),
        reflux_ratio_c2=r2, boilup_ratio_c2=boilup(r2, splits[1]),
        reflux_ratio_c3=r3,
    ))

    options = cfg.solver_options()
    warm: List[ColumnSolution] = []
    column_feed = feed.restate(design.pressures[0])
    for k in range(N_COLUMNS):
        pressure = design.pressures[k]
        try:
            estimate = _section_profile(design.columns[k], splits[k], components, pressure)
        except OptimizerError as exc:
            raise InitializationFailed(k + 1, exc.detail) from None

        solution = None
        while True:
            column_op = cfg.column_operating(operating, design.pressures)[k]
            solution = solve_column(design.columns[k], column_op, column_feed, components,
                                    init=estimate, options=options)
            reflux_hi = bounds.reflux_ratio[1]
            if solution.converged or k < 2 or solution.failure_kind != "spec_unattainable" \
                    or operating.reflux_ratio_c3 >= reflux_hi:
                break
            operating = operating.model_copy(
                update={"reflux_ratio_c3": min(2.0 * operating.reflux_ratio_c3, reflux_hi)}
            )
        if not solution.converged:
            logger.warning("Initialization failed in column %d: %s", k + 1, solution.failure)
            raise InitializationFailed(k + 1, solution.failure or "no convergence")

        warm.append(solution)
        if k == 0:
            column_feed = solution.distillate.restate(design.pressures[1])
        elif k == 1:
            column_feed = solution.bottoms.restate(design.pressures[2])

    logger.debug("Initialized %s at %s", design.key(), operating)
    return TrainInitialization(operating=operating, warm_starts=tuple(warm), splits=splits)

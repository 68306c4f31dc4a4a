"""
Steady-state equilibrium-stage column under constant molar overflow.

Stage convention: `n_stages` equilibrium stages numbered from the top. The
reboiler is a non-separating heat exchanger (boilup and bottoms both leave with
the composition of the bottom-stage liquid), a total condenser is
non-separating too, and a partial condenser is an isothermal flash at its fixed
temperature. Feeds enter as saturated liquid.

The stage temperatures are solved by a Newton-type method (hybrid Powell via
`scipy.optimize.root`): at trial temperatures the component balances give the
liquid component flows, and each stage must close its liquid flow sum. A
partial condenser adds an outer bracketed root on its vapor fraction.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Annotated, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq, root

from errors import InvalidInput, NoConvergence, OptimizerError
from thermo import ComponentSet, bubble_point, flash

logger = logging.getLogger(__name__)

GAS_CONSTANT = 8314.46  # J/(kmol K)
MAX_SWEEPS = 500  # residual evaluations per stage-temperature solve
SUM_TOLERANCE = 1e-9
NEWTON_XTOL = 1e-12
FD_STEP = 1e-7  # relative
WINDOW_SLOPE = 0.05  # 1/K
ATMOSPHERIC = 101.325  # kPa


@dataclass(frozen=True)
class SolverOptions:
    max_sweeps: int = MAX_SWEEPS


class ColumnDesign(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_stages: int = Field(..., ge=1)
    feed_stage: int = Field(..., ge=1)  # 1 = top
    diameter: float = Field(..., gt=0)  # m

    @model_validator(mode="after")
    def check_geometry(self):
        if self.feed_stage > self.n_stages:
            raise ValueError(f"feed stage {self.feed_stage} below the last stage {self.n_stages}")
        if abs(self.diameter * 10.0 - round(self.diameter * 10.0)) > 1e-9:
            raise ValueError(f"diameter {self.diameter} m is not on the 0.1 m grid")
        return self

    @property
    def area(self) -> float:
        return math.pi * self.diameter ** 2 / 4.0


class TotalCondenser(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["total"] = "total"


class PartialCondenser(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["partial"] = "partial"
    temperature: float = Field(..., gt=0)  # K


class BoilupRatio(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["boilup_ratio"] = "boilup_ratio"
    value: float = Field(..., ge=0)


class DistillateRate(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["distillate_rate"] = "distillate_rate"
    value: float = Field(..., gt=0)  # kmol/h


class DistillatePurity(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["distillate_purity"] = "distillate_purity"
    component: str
    value: float = Field(..., gt=0, lt=1)  # mass fraction


Condenser = Annotated[Union[TotalCondenser, PartialCondenser], Field(discriminator="kind")]
BottomSpec = Annotated[
    Union[BoilupRatio, DistillateRate, DistillatePurity], Field(discriminator="kind")
]


class ColumnOperating(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pressure: float = Field(..., gt=0, le=ATMOSPHERIC)  # kPa
    condenser: Condenser
    reflux_ratio: float = Field(..., ge=0)
    bottom_spec: BottomSpec


@dataclass(frozen=True)
class Stream:
    total_flow: float  # kmol/h
    composition: np.ndarray  # mole fractions
    temperature: float  # K
    pressure: float  # kPa

    def __post_init__(self):
        composition = np.array(self.composition, dtype=float)
        composition.setflags(write=False)
        object.__setattr__(self, "composition", composition)
        if not self.total_flow >= 0:
            raise InvalidInput(f"stream flow must be non-negative, got {self.total_flow}")
        if (composition < 0).any():
            raise InvalidInput("stream composition has negative entries")
        if abs(composition.sum() - 1.0) > 1e-9:
            raise InvalidInput(f"stream composition sums to {composition.sum():.12f}")

    @classmethod
    def from_component_flows(cls, flows: np.ndarray, temperature: float, pressure: float) -> "Stream":
        flows = np.clip(np.asarray(flows, dtype=float), 0.0, None)
        total = float(flows.sum())
        return cls(total, flows / total, temperature, pressure)

    @property
    def component_flows(self) -> np.ndarray:
        return self.total_flow * self.composition

    def mass_flow(self, components: ComponentSet) -> float:
        """kg/h"""
        return float(np.dot(self.component_flows, components.molar_mass))

    def restate(self, pressure: float, temperature: Optional[float] = None) -> "Stream":
        return replace(
            self, pressure=pressure,
            temperature=self.temperature if temperature is None else temperature,
        )


@dataclass(frozen=True)
class StageProfiles:
    temperature: np.ndarray  # (n,)
    x: np.ndarray  # (n, c)
    y: np.ndarray  # (n, c)
    liquid: np.ndarray  # (n,) kmol/h leaving each stage
    vapor: np.ndarray  # (n,) kmol/h leaving each stage


@dataclass(frozen=True)
class ColumnSolution:
    design: ColumnDesign
    converged: bool
    distillate: Optional[Stream] = None
    bottoms: Optional[Stream] = None
    stage_profiles: Optional[StageProfiles] = None
    reboiler_duty: float = 0.0  # kW
    condenser_duty: float = 0.0  # kW
    max_f_factor: float = 0.0  # Pa^0.5
    min_f_factor: float = 0.0
    reboiler_temperature: float = float("nan")
    vapor_distillate: float = 0.0  # kmol/h leaving a partial condenser as vapor
    condenser_vapor_fraction: float = 0.0
    reflux_ratio: float = 0.0
    distillate_rate: float = 0.0
    residual: float = float("inf")
    iterations: int = 0
    failure: Optional[str] = None
    failure_kind: Optional[str] = None  # no_convergence | spec_unattainable | out_of_range | invalid


def f_factor(vapor_flow, y, T, P: float, diameter: float, molar_mass: np.ndarray):
    """
    F-factor u*sqrt(rho) in Pa^0.5 of an ideal-gas vapor.

    `y` may be one composition or a stack of them, with matching `T`.
    """
    if not diameter > 0:
        raise InvalidInput(f"diameter must be positive, got {diameter}")
    y = np.asarray(y, dtype=float)
    T = np.asarray(T, dtype=float)
    mixture_mass = y @ molar_mass
    pressure_pa = P * 1000.0
    rho = pressure_pa * mixture_mass / (GAS_CONSTANT * T)
    volumetric = np.asarray(vapor_flow, dtype=float) / 3600.0 * GAS_CONSTANT * T / pressure_pa
    u = volumetric / (math.pi * diameter ** 2 / 4.0)
    return u * np.sqrt(rho)


def _failed(design: ColumnDesign, kind: str, reason: str, iterations: int = 0,
            residual: float = float("inf")) -> ColumnSolution:
    logger.debug("Column %s failed (%s): %s", design, kind, reason)
    return ColumnSolution(
        design=design, converged=False, failure=reason, failure_kind=kind,
        iterations=iterations, residual=residual,
    )


def split_estimate(feed: Stream, distillate_rate: float, components: ComponentSet,
                   pressure: float) -> Tuple[np.ndarray, np.ndarray]:
    """Crude product compositions: the most volatile components fill the distillate first."""
    flows = feed.component_flows
    order = np.argsort(components.boiling_temperatures(pressure))
    top = np.zeros_like(flows)
    remaining = distillate_rate
    for i in order:
        take = min(flows[i], remaining)
        top[i] = take
        remaining -= take
        if remaining <= 0:
            break
    bottom = flows - top
    eps = 1e-12
    x_top = (top + eps) / (top + eps).sum()
    x_bottom = (bottom + eps) / (bottom + eps).sum()
    return x_top, x_bottom


def _initial_temperatures(design: ColumnDesign, feed: Stream, distillate_rate: float,
                          components: ComponentSet, pressure: float,
                          init: Optional[ColumnSolution]) -> np.ndarray:
    n = design.n_stages
    if init is not None and init.stage_profiles is not None:
        previous = init.stage_profiles.temperature
        if len(previous) == 1:
            return np.full(n, float(previous[0]))
        return np.interp(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, len(previous)), previous)
    x_top, x_bottom = split_estimate(feed, distillate_rate, components, pressure)
    t_top, _ = bubble_point(x_top, pressure, components)
    t_bottom, _ = bubble_point(x_bottom, pressure, components)
    return np.linspace(t_top, t_bottom, n)


def _liquid_flows(S: np.ndarray, top_return, bottom_return: float, feeds: np.ndarray) -> np.ndarray:
    """
    Liquid component flows from the stage balances at fixed stripping factors.

    Row j reads -l[j-1] + (1 + S[j]) l[j] - S[j+1] l[j+1] = f[j], with the
    reflux returned to the top row and the boilup to the bottom row. The
    Thomas sweep runs down the stage axis (-2) and is vectorized over
    components and any leading axes. The matrix is a column-diagonally
    dominant M-matrix, so no pivoting is needed and the flows are non-negative.
    """
    n = S.shape[-2]
    diagonal = 1.0 + S
    diagonal[..., 0, :] -= top_return * S[..., 0, :]
    diagonal[..., -1, :] -= bottom_return
    upper = np.zeros_like(S)
    elimination = np.empty(np.broadcast_shapes(S.shape, feeds.shape))

    pivot = diagonal[..., 0, :]
    if n > 1:
        upper[..., 0, :] = -S[..., 1, :] / pivot
    elimination[..., 0, :] = feeds[0] / pivot
    for j in range(1, n):
        pivot = diagonal[..., j, :] + upper[..., j - 1, :]
        if j < n - 1:
            upper[..., j, :] = -S[..., j + 1, :] / pivot
        elimination[..., j, :] = (feeds[j] + elimination[..., j - 1, :]) / pivot

    flows = np.empty_like(elimination)
    flows[..., -1, :] = elimination[..., -1, :]
    for j in range(n - 2, -1, -1):
        flows[..., j, :] = elimination[..., j, :] - upper[..., j, :] * flows[..., j + 1, :]
    return flows


class _StageFailure(Exception):
    def __init__(self, residual: float, evaluations: int):
        super().__init__(residual)
        self.residual = residual
        self.evaluations = evaluations


class _StageEquations:
    """
    Stage temperatures of one column at fixed molar flows.

    At trial temperatures the liquid component flows follow from the stage
    balances; the residual of stage j is ln(sum_i l_ij / L_j). Outside the
    Antoine window K is frozen at the nearest bound and a linear term pulls
    the temperature back.
    """

    def __init__(self, components: ComponentSet, pressure: float, liquid: np.ndarray, vapor: float,
                 reflux: float, feeds: np.ndarray, condenser_k: Optional[np.ndarray]):
        self.components = components
        self.pressure = pressure
        self.liquid = liquid
        self.vapor = vapor
        self.reflux = reflux
        self.feeds = feeds
        self.condenser_k = condenser_k  # None for a total condenser
        self.vapor_fraction = 0.0

    def top_return(self):
        share = self.reflux / self.vapor
        if self.condenser_k is None:
            return share
        return share / (1.0 + self.vapor_fraction * (self.condenser_k - 1.0))

    def state(self, T: np.ndarray):
        """Clipped temperatures, K values, stripping factors and liquid flows at `T`."""
        low, high = self.components.window
        T_in = np.clip(T, low, high)
        K = self.components.k_matrix(T_in.reshape(-1), self.pressure).reshape(T_in.shape + (-1,))
        S = K * (self.vapor / self.liquid)[:, None]
        flows = _liquid_flows(S, self.top_return(), self.vapor / self.liquid[-1], self.feeds)
        return T_in, K, S, flows

    def residual(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        T_in, _, _, flows = self.state(T)
        sums = np.maximum(flows.sum(axis=-1), 1e-300)
        return np.log(sums / self.liquid) - WINDOW_SLOPE * (T - T_in)

    def jacobian(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        step = FD_STEP * np.abs(T)
        base = self.residual(T)
        shifted = self.residual(T[None, :] + np.diag(step))
        return ((shifted - base) / step[:, None]).T

    def solve(self, T0: np.ndarray, max_evaluations: int) -> Tuple[np.ndarray, float, int]:
        """Newton-type solve of the stage temperatures; raises _StageFailure."""
        T = np.asarray(T0, dtype=float)
        used = 0
        worst = math.inf
        while used < max_evaluations:
            result = root(
                self.residual, T, jac=self.jacobian, method="hybr",
                options={"xtol": NEWTON_XTOL, "maxfev": max_evaluations - used},
            )
            used += max(int(result.nfev), 1)
            r = self.residual(result.x)
            if not np.isfinite(r).all():
                break
            if float(np.abs(r).max()) < worst:
                worst = float(np.abs(r).max())
                T = result.x
            if worst < SUM_TOLERANCE:
                return T, worst, used
            # restart from the best point with a fresh Jacobian
        raise _StageFailure(worst, used)

    def overhead(self, T: np.ndarray) -> np.ndarray:
        _, _, S, flows = self.state(T)
        return S[0] * flows[0]


def _solve_at_rate(design: ColumnDesign, op: ColumnOperating, feed: Stream,
                   components: ComponentSet, distillate_rate: float,
                   init: Optional[ColumnSolution], options: SolverOptions) -> ColumnSolution:
    n, c = design.n_stages, len(components)
    P = op.pressure
    F = feed.total_flow
    D = distillate_rate
    B = F - D
    if not 0 < D < F:
        return _failed(design, "spec_unattainable", f"distillate rate {D:.6g} outside (0, {F:.6g}) kmol/h")

    reflux = op.reflux_ratio * D
    V = reflux + D
    f = design.feed_stage - 1
    if reflux <= 0 and f > 0:
        return _failed(design, "invalid", "zero reflux leaves the stages above the feed dry")
    L = np.full(n, reflux)
    L[f:] += F
    feeds = np.zeros((n, c))
    feeds[f] = feed.component_flows

    partial = isinstance(op.condenser, PartialCondenser)
    try:
        K_condenser = components.k_matrix(op.condenser.temperature, P)[0] if partial else None
        starts = [_initial_temperatures(design, feed, D, components, P, init)]
        if init is not None:
            starts.append(_initial_temperatures(design, feed, D, components, P, None))
    except OptimizerError as exc:
        return _failed(design, "out_of_range", exc.detail)

    equations = _StageEquations(components, P, L, V, reflux, feeds, K_condenser)
    progress = {"T": starts[0], "evaluations": 0, "residual": math.inf}

    def settle(vapor_fraction: float) -> np.ndarray:
        equations.vapor_fraction = vapor_fraction
        try:
            T, residual, used = equations.solve(progress["T"], options.max_sweeps)
        except _StageFailure as exc:
            progress["evaluations"] += exc.evaluations
            progress["residual"] = exc.residual
            raise
        progress.update(T=T, residual=residual, evaluations=progress["evaluations"] + used)
        return T

    def vapor_gap(vapor_fraction: float) -> float:
        overhead = equations.overhead(settle(vapor_fraction))
        made = flash(overhead / overhead.sum(), op.condenser.temperature, P, components).vapor_fraction
        return made - vapor_fraction

    phi = 0.0
    for attempt, T_start in enumerate(starts):
        progress["T"] = T_start
        try:
            if partial:
                phi_max = D / V
                if vapor_gap(0.0) > SUM_TOLERANCE:
                    if vapor_gap(phi_max) > 0.0:
                        return _failed(
                            design, "spec_unattainable",
                            f"condenser vapor exceeds the distillate share {phi_max:.4f}",
                            progress["evaluations"], progress["residual"],
                        )
                    phi = brentq(vapor_gap, 0.0, phi_max, xtol=1e-13)
                settle(phi)
            else:
                settle(0.0)
            break
        except _StageFailure:
            if attempt + 1 < len(starts):
                logger.debug("Warm start failed for a %d-stage column, retrying cold", design.n_stages)
                continue
            return _failed(
                design, "no_convergence",
                f"stage temperatures did not converge within {options.max_sweeps} evaluations",
                progress["evaluations"], progress["residual"],
            )
        except OptimizerError as exc:
            return _failed(design, "out_of_range", exc.detail, progress["evaluations"], progress["residual"])
        except RuntimeError as exc:
            return _failed(
                design, "no_convergence", f"condenser vapor fraction: {exc}",
                progress["evaluations"], progress["residual"],
            )

    T = progress["T"]
    T_in, K, S, l = equations.state(T)
    if np.abs(T - T_in).max() > 0.0:
        low, high = components.window
        return _failed(
            design, "out_of_range",
            f"stage temperatures leave the correlation window [{low:g}, {high:g}] K",
            progress["evaluations"], progress["residual"],
        )
    l = np.clip(l, 0.0, None)
    x = l / l.sum(axis=1)[:, None]
    reflux_fraction = equations.top_return()
    logger.debug("Column with %d stages converged in %d evaluations", design.n_stages, progress["evaluations"])

    overhead = S[0] * l[0]
    distillate_flows = overhead * (1.0 - reflux_fraction)
    bottoms_flows = l[-1] * B / L[-1]
    x_bottom = x[-1]
    T_condenser = op.condenser.temperature if partial else T[0]
    distillate = Stream.from_component_flows(distillate_flows, T_condenser, P)
    bottoms = Stream.from_component_flows(bottoms_flows, T[-1], P)

    y = K * x
    y = y / y.sum(axis=1)[:, None]
    hv = components.heat_of_vaporization
    if partial:
        condensed = overhead * (1.0 - phi) / (1.0 + phi * (K_condenser - 1.0))
    else:
        condensed = overhead
    condenser_duty = float(np.dot(condensed, hv)) / 3600.0
    reboiler_duty = V * float(np.dot(x_bottom, hv)) / 3600.0

    # vapor leaving every stage plus the boilup entering the bottom stage
    vapor_states = np.vstack([y, x_bottom])
    vapor_temperatures = np.append(T, T[-1])
    factors = f_factor(V, vapor_states, vapor_temperatures, P, design.diameter, components.molar_mass)

    profiles = StageProfiles(
        temperature=T, x=x, y=y, liquid=L.copy(), vapor=np.full(n, V),
    )
    return ColumnSolution(
        design=design,
        converged=True,
        distillate=distillate,
        bottoms=bottoms,
        stage_profiles=profiles,
        reboiler_duty=reboiler_duty,
        condenser_duty=condenser_duty,
        max_f_factor=float(factors.max()),
        min_f_factor=float(factors.min()),
        reboiler_temperature=float(T[-1]),
        vapor_distillate=phi * V if partial else 0.0,
        condenser_vapor_fraction=phi if partial else 0.0,
        reflux_ratio=op.reflux_ratio,
        distillate_rate=D,
        residual=progress["residual"],
        iterations=progress["evaluations"],
    )


def _product_purity(solution: ColumnSolution, index: int, components: ComponentSet) -> float:
    return float(components.mass_fractions(solution.distillate.composition)[index])


def _solve_for_purity(design: ColumnDesign, op: ColumnOperating, feed: Stream,
                      components: ComponentSet, spec: DistillatePurity,
                      init: Optional[ColumnSolution], options: SolverOptions) -> ColumnSolution:
    """Largest distillate rate whose product purity meets the specification."""
    index = components.index(spec.component)
    F = feed.total_flow
    tb = components.boiling_temperatures(op.pressure)
    key_flow = F * float(feed.composition[tb <= tb[index]].sum())
    d_min, d_max = 1e-4 * F, (1.0 - 1e-4) * F
    target = spec.value + 1e-8
    step = 0.05 * key_flow

    warm = init

    def solve(rate: float) -> ColumnSolution:
        nonlocal warm
        solution = _solve_at_rate(design, op, feed, components, rate, warm, options)
        if solution.converged:
            warm = solution
        return solution

    start = init.distillate_rate if (init is not None and init.distillate_rate > 0) else key_flow
    rate = min(max(start, d_min), d_max)
    solution = solve(rate)
    if not solution.converged:
        return solution

    if _product_purity(solution, index, components) >= target:
        ok_rate, ok_solution = rate, solution
        grow = step
        while True:
            trial = min(ok_rate + grow, d_max)
            trial_solution = solve(trial)
            if not trial_solution.converged:
                return trial_solution
            if _product_purity(trial_solution, index, components) < target:
                bad_rate = trial
                break
            ok_rate, ok_solution = trial, trial_solution
            if trial >= d_max:
                return ok_solution
            grow *= 2.0
    else:
        bad_rate = rate
        ok_rate = None
        trial = rate
        while trial > d_min:
            trial = max(trial - step, d_min)
            trial_solution = solve(trial)
            if not trial_solution.converged:
                return trial_solution
            if _product_purity(trial_solution, index, components) >= target:
                ok_rate, ok_solution = trial, trial_solution
                break
            bad_rate = trial
        if ok_rate is None:
            return _failed(
                design, "spec_unattainable",
                f"{spec.component} purity {spec.value} not reached at reflux ratio {op.reflux_ratio}",
            )

    failures = []

    def purity_gap(rate: float) -> float:
        trial_solution = solve(rate)
        if not trial_solution.converged:
            failures.append(trial_solution)
            raise NoConvergence(trial_solution.failure or "column failed during purity search")
        return _product_purity(trial_solution, index, components) - target

    try:
        rate_at_spec = brentq(purity_gap, ok_rate, bad_rate, xtol=1e-10 * F, maxiter=100)
    except NoConvergence:
        return failures[-1]
    except RuntimeError as exc:
        return _failed(design, "no_convergence", f"purity search: {exc}")

    final = solve(rate_at_spec)
    if not final.converged or _product_purity(final, index, components) < spec.value:
        return ok_solution
    return final


def solve_column(design: ColumnDesign, op: ColumnOperating, feed: Stream,
                 components: ComponentSet, init: Optional[ColumnSolution] = None,
                 options: Optional[SolverOptions] = None) -> ColumnSolution:
    """
    Solve one column. Convergence failures come back as a solution with
    `converged=False` and a failure reason; invalid inputs raise.

    `init` is any earlier solution carrying stage profiles, converged or an
    estimate; its temperatures are interpolated onto this design.
    """
    if not feed.total_flow > 0:
        raise InvalidInput("column feed has zero flow")
    if len(feed.composition) != len(components):
        raise InvalidInput(
            f"feed has {len(feed.composition)} components, component set has {len(components)}"
        )
    if init is not None and init.stage_profiles is None:
        init = None
    options = options or SolverOptions()

    spec = op.bottom_spec
    if isinstance(spec, DistillatePurity):
        return _solve_for_purity(design, op, feed, components, spec, init, options)
    if isinstance(spec, DistillateRate):
        rate = spec.value
    else:
        rate = spec.value * feed.total_flow / (op.reflux_ratio + 1.0 + spec.value)
    return _solve_at_rate(design, op, feed, components, rate, init, options)

import hashlib
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from column import Stream
from errors import CompositionOutOfTolerance, InvalidInput, LengthMismatch, SchemaError, UnknownScenario
from thermo import ComponentSet, bubble_point

logger = logging.getLogger(__name__)

DEFAULT_PENALTY_PROFIT = -1e8  # EUR/y for a scenario without a feasible operating point
RAW_SUM_TOLERANCE = 0.01
WEIGHT_TOLERANCE = 1e-9


class ScenarioEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1)
    label: str = ""
    weight: Optional[float] = Field(None, ge=0, le=1)
    feed_mass_flow: Optional[float] = Field(None, gt=0)
    composition: Dict[str, float]


class ScenarioFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = 1
    feed_mass_flow: float = Field(1000.0, gt=0)  # kg/h
    feed_pressure: float = Field(30.0, gt=0)  # kPa
    feed_temperature: Optional[float] = Field(None, gt=0)  # K
    scenario: List[ScenarioEntry] = Field(..., min_length=1)


@dataclass(frozen=True)
class Scenario:
    id: str
    weight: float
    feed_mass_fractions: np.ndarray  # normalized, indexed against the component set
    feed_mass_flow: float  # kg/h
    feed_pressure: float  # kPa
    feed_temperature: Optional[float] = None  # K, saturated liquid when None
    label: str = ""
    raw_percentages: Dict[str, float] = field(default_factory=dict, compare=False)


def _normalize_weights(entries: Sequence[ScenarioEntry], source: Path) -> List[float]:
    given = [entry.weight for entry in entries]
    if all(w is None for w in given):
        return [1.0 / len(entries)] * len(entries)
    if any(w is None for w in given):
        raise SchemaError(f"{source}: either every scenario has a weight or none does")
    total = math.fsum(given)
    if abs(total - 1.0) > WEIGHT_TOLERANCE:
        raise SchemaError(f"{source}: scenario weights sum to {total}, expected 1")
    return [w / total for w in given]


def load_scenarios(path: Union[str, Path], components: ComponentSet) -> List[Scenario]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read scenario file {path}: {exc}") from None
    try:
        document = ScenarioFile(**tomllib.loads(raw.decode("utf-8")))
    except (tomllib.TOMLDecodeError, ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None

    ids = [entry.id for entry in document.scenario]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate scenario ids in {ids}")
    weights = _normalize_weights(document.scenario, path)

    scenarios = []
    for entry, weight in zip(document.scenario, weights):
        if entry.feed_mass_flow is not None and entry.feed_mass_flow != document.feed_mass_flow:
            raise SchemaError(
                f"{path}: scenario '{entry.id}' feed flow {entry.feed_mass_flow} kg/h differs from "
                f"the shared {document.feed_mass_flow} kg/h"
            )
        fractions = np.zeros(len(components))
        for name, percent in entry.composition.items():
            if percent < 0:
                raise SchemaError(f"{path}: scenario '{entry.id}' has negative {name}")
            fractions[components.index(name)] = percent / 100.0
        total = fractions.sum()
        if abs(total - 1.0) > RAW_SUM_TOLERANCE:
            raise CompositionOutOfTolerance(
                f"{path}: scenario '{entry.id}' sums to {100 * total:.2f} wt %"
            )
        scenarios.append(Scenario(
            id=entry.id,
            label=entry.label or entry.id,
            weight=weight,
            feed_mass_fractions=fractions / total,
            feed_mass_flow=document.feed_mass_flow,
            feed_pressure=document.feed_pressure,
            feed_temperature=document.feed_temperature,
            raw_percentages=dict(entry.composition),
        ))

    logger.info(
        "Loaded %d scenarios from %s (sha256 %s)",
        len(scenarios), path, hashlib.sha256(raw).hexdigest(),
    )
    return scenarios


def find_scenario(scenarios: Sequence[Scenario], scenario_id: str) -> Scenario:
    for scenario in scenarios:
        if scenario.id == scenario_id:
            return scenario
    raise UnknownScenario(
        f"unknown scenario '{scenario_id}', known: {', '.join(s.id for s in scenarios)}"
    )


def to_feed_stream(s: Scenario, components: ComponentSet) -> Stream:
    """Molar feed stream of a scenario."""
    moles = s.feed_mass_flow * s.feed_mass_fractions / components.molar_mass
    total = float(moles.sum())
    x = moles / total
    temperature = s.feed_temperature
    if temperature is None:
        temperature, _ = bubble_point(x, s.feed_pressure, components)
    return Stream(total_flow=total, composition=x, temperature=temperature, pressure=s.feed_pressure)


def weighted_fitness(per_scenario_profits: Sequence[Optional[float]], weights: Sequence[float],
                     penalty: float = DEFAULT_PENALTY_PROFIT) -> float:
    """
    Weighted mean profit; scenarios without a feasible result (None) count as
    `penalty`.
    """
    if len(per_scenario_profits) != len(weights):
        raise LengthMismatch(
            f"{len(per_scenario_profits)} scenario profits for {len(weights)} weights"
        )
    if any(w < 0 for w in weights) or abs(math.fsum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise InvalidInput(f"weights must be non-negative and sum to 1, got {list(weights)}")
    values = [penalty if p is None else p for p in per_scenario_profits]
    return math.fsum(w * v for w, v in zip(weights, values))

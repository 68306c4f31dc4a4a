"""
Annual profit of a solved train: product revenue minus waste disposal,
utilities and straight-line depreciation of the Lang-factor investment.
"""
import hashlib
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from column import ColumnDesign
from errors import InfeasibleSolution, SchemaError
from flowsheet import TrainDesign, TrainSolution

logger = logging.getLogger(__name__)


class EconParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    price_product: float = Field(1.5, ge=0)  # EUR/kg
    cost_waste: float = Field(1.0, ge=0)  # EUR/kg
    steam_tariff: float = Field(0.03, ge=0)  # EUR/kWh of reboiler duty
    cooling_tariff: float = Field(0.003, ge=0)  # EUR/kWh of condenser duty
    lang_factor: float = Field(4.74, gt=0)
    depreciation_years: float = Field(10.0, gt=0)
    operating_hours: float = Field(8000.0, gt=0, le=8784)  # h/y
    stage_height: float = Field(0.5, gt=0)  # m of packing per equilibrium stage

    # shell: base * (d / d_ref)^a * (H / H_ref)^b
    shell_base_cost: float = Field(60000.0, ge=0)  # EUR
    shell_reference_diameter: float = Field(1.0, gt=0)  # m
    shell_diameter_exponent: float = Field(1.066, gt=0)
    shell_reference_height: float = Field(10.0, gt=0)  # m
    shell_height_exponent: float = Field(0.802, gt=0)
    packing_cost: float = Field(2500.0, ge=0)  # EUR per m3 of packed volume


@dataclass(frozen=True)
class ProfitBreakdown:
    revenue: float  # EUR/y
    waste_cost: float
    utility_cost: float
    depreciation: float

    @property
    def total(self) -> float:
        return self.revenue - self.waste_cost - self.utility_cost - self.depreciation

    def as_dict(self) -> Dict[str, float]:
        return {**asdict(self), "total": self.total}


def equipment_cost(column: ColumnDesign, econ: EconParams) -> float:
    """Purchased cost of one packed column (shell plus packing), EUR."""
    height = column.n_stages * econ.stage_height
    shell = (
        econ.shell_base_cost
        * (column.diameter / econ.shell_reference_diameter) ** econ.shell_diameter_exponent
        * (height / econ.shell_reference_height) ** econ.shell_height_exponent
    )
    packed_volume = math.pi * column.diameter ** 2 / 4.0 * height
    return shell + econ.packing_cost * packed_volume


def investment_cost(design: TrainDesign, econ: EconParams) -> float:
    """Fixed capital, EUR."""
    return econ.lang_factor * sum(equipment_cost(column, econ) for column in design.columns)


def utility_cost(sol: TrainSolution, econ: EconParams) -> float:
    """EUR/y"""
    return econ.operating_hours * (
        econ.steam_tariff * sol.total_reboiler_duty + econ.cooling_tariff * sol.total_condenser_duty
    )


def profit_breakdown(sol: TrainSolution, design: TrainDesign, econ: EconParams) -> ProfitBreakdown:
    if not sol.feasible:
        raise InfeasibleSolution(
            "annual profit of an infeasible train: " + ("; ".join(sol.diagnostics) or "no diagnostics")
        )
    hours = econ.operating_hours
    # the midboiler stream carries neither revenue nor disposal cost
    return ProfitBreakdown(
        revenue=econ.price_product * sol.product_mass_flow * hours,
        waste_cost=econ.cost_waste * sol.waste_mass_flow * hours,
        utility_cost=utility_cost(sol, econ),
        depreciation=investment_cost(design, econ) / econ.depreciation_years,
    )


def annual_profit(sol: TrainSolution, design: TrainDesign, econ: EconParams) -> float:
    """EUR/y"""
    return profit_breakdown(sol, design, econ).total


def load_econ(path: Union[str, Path]) -> EconParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
        econ = EconParams(**tomllib.loads(raw.decode("utf-8")))
    except OSError as exc:
        raise SchemaError(f"cannot read economics file {path}: {exc}") from None
    except (tomllib.TOMLDecodeError, ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None
    logger.info("Loaded economics from %s (sha256 %s)", path, hashlib.sha256(raw).hexdigest())
    return econ

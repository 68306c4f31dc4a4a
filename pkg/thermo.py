"""
Pure-component vapor pressures and ideal vapor-liquid equilibrium.

Vapor pressures follow the Antoine form log10(P / kPa) = A - B / (T / K + C);
K-values follow Raoult's law. Component data lives in `data/components.toml`.
"""
import hashlib
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.optimize import brentq

from errors import (
    InvalidInput,
    NoConvergence,
    NonPositivePressure,
    SchemaError,
    TemperatureOutOfRange,
)

logger = logging.getLogger(__name__)

BRACKET_WIDENING = 20.0  # K on each side of the pure-component boiling points
BUBBLE_MAX_ITER = 200
SUM_TOLERANCE = 1e-9


class AntoineCoefficients(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    A: float
    B: float = Field(..., gt=0)
    C: float
    t_min: float = Field(..., gt=0)  # K
    t_max: float  # K
    source: str = ""

    @model_validator(mode="after")
    def check_range(self):
        if not self.t_min < self.t_max:
            raise ValueError(f"empty validity range [{self.t_min}, {self.t_max}]")
        # B > 0 and T + C > 0 keep psat strictly increasing over the range
        if self.t_min + self.C <= 0:
            raise ValueError("T + C must stay positive over the validity range")
        return self


class ComponentRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(..., min_length=1)
    molar_mass: float = Field(..., gt=0)  # kg/kmol
    antoine: AntoineCoefficients
    heat_of_vaporization: float = Field(..., gt=0)  # kJ/kmol
    liquid_density: float = Field(..., gt=0)  # kg/m3
    normal_boiling_point: Optional[float] = None  # K
    is_product: bool = False
    boiling_class: Literal["low", "mid", "high"]


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


class ComponentSet:
    """Ordered, immutable component list. Every composition vector is indexed against it."""

    def __init__(self, records: Sequence[ComponentRecord]):
        names = [record.name for record in records]
        if not names:
            raise SchemaError("component set is empty")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate component names in {names}")
        products = [record.name for record in records if record.is_product]
        if len(products) != 1:
            raise SchemaError(f"exactly one component must be the product, found {products}")

        self.records: Tuple[ComponentRecord, ...] = tuple(records)
        self._index = {name: i for i, name in enumerate(names)}
        self.product_index = self._index[products[0]]

        self.A = _frozen([r.antoine.A for r in records])
        self.B = _frozen([r.antoine.B for r in records])
        self.C = _frozen([r.antoine.C for r in records])
        self.t_min = _frozen([r.antoine.t_min for r in records])
        self.t_max = _frozen([r.antoine.t_max for r in records])
        self.molar_mass = _frozen([r.molar_mass for r in records])
        self.heat_of_vaporization = _frozen([r.heat_of_vaporization for r in records])
        self.liquid_density = _frozen([r.liquid_density for r in records])

        # temperatures every component accepts
        self.window = (float(self.t_min.max()), float(self.t_max.min()))
        if self.window[0] >= self.window[1]:
            raise SchemaError("Antoine validity ranges of the components do not overlap")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ComponentRecord]:
        return iter(self.records)

    def __getitem__(self, key: Union[int, str]) -> ComponentRecord:
        if isinstance(key, str):
            return self.records[self.index(key)]
        return self.records[key]

    @property
    def names(self) -> List[str]:
        return [record.name for record in self.records]

    @property
    def product(self) -> ComponentRecord:
        return self.records[self.product_index]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown component '{name}'") from None

    def class_mask(self, boiling_class: str) -> np.ndarray:
        return np.array([r.boiling_class == boiling_class for r in self.records])

    def check_temperature(self, T) -> None:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        below = T[:, None] < self.t_min
        above = T[:, None] > self.t_max
        bad = below | above
        if bad.any():
            stage, comp = np.argwhere(bad)[0]
            raise TemperatureOutOfRange(
                self.records[comp].name, float(T[stage]),
                float(self.t_min[comp]), float(self.t_max[comp]),
            )

    def psat_matrix(self, T) -> np.ndarray:
        """Saturation pressures (kPa), one row per temperature."""
        T = np.atleast_1d(np.asarray(T, dtype=float))
        self.check_temperature(T)
        return self._psat_unchecked(T)

    def _psat_unchecked(self, T: np.ndarray) -> np.ndarray:
        return 10.0 ** (self.A - self.B / (T[:, None] + self.C))

    def k_matrix(self, T, P: float) -> np.ndarray:
        _check_pressure(P)
        return self.psat_matrix(T) / P

    def boiling_temperatures(self, P: float) -> np.ndarray:
        """Pure-component boiling temperatures at P (inverse Antoine, unclipped)."""
        _check_pressure(P)
        return self.B / (self.A - math.log10(P)) - self.C

    def mass_fractions(self, x: np.ndarray) -> np.ndarray:
        mass = np.asarray(x, dtype=float) * self.molar_mass
        return mass / mass.sum()

    def molar_fractions(self, w: np.ndarray) -> np.ndarray:
        moles = np.asarray(w, dtype=float) / self.molar_mass
        return moles / moles.sum()


def _check_pressure(P: float) -> None:
    if not P > 0:
        raise NonPositivePressure(P)


def psat(component: ComponentRecord, T: float) -> float:
    """Saturation pressure in kPa."""
    a = component.antoine
    if not a.t_min <= T <= a.t_max:
        raise TemperatureOutOfRange(component.name, T, a.t_min, a.t_max)
    return 10.0 ** (a.A - a.B / (T + a.C))


def k_value(component: ComponentRecord, T: float, P: float) -> float:
    _check_pressure(P)
    return psat(component, T) / P


def boiling_temperature(component: ComponentRecord, P: float) -> float:
    """Temperature at which psat equals P. Not range-checked."""
    _check_pressure(P)
    a = component.antoine
    return a.B / (a.A - math.log10(P)) - a.C


def _check_composition(x, components: ComponentSet, label: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (len(components),):
        raise InvalidInput(f"{label} has shape {x.shape}, expected ({len(components)},)")
    if (x < 0).any():
        raise InvalidInput(f"{label} has negative entries")
    if abs(x.sum() - 1.0) > SUM_TOLERANCE:
        raise InvalidInput(f"{label} sums to {x.sum():.12f}, expected 1")
    return x


def bubble_point(x, P: float, components: ComponentSet) -> Tuple[float, np.ndarray]:
    """Bubble temperature (K) and incipient vapor composition of liquid x at P (kPa)."""
    x = _check_composition(x, components)
    _check_pressure(P)

    present = x > 0
    tb = components.boiling_temperatures(P)[present]
    lo_window, hi_window = components.window
    lo = max(float(tb.min()) - BRACKET_WIDENING, lo_window)
    hi = min(float(tb.max()) + BRACKET_WIDENING, hi_window)

    def residual(T: float) -> float:
        return float(np.dot(components._psat_unchecked(np.array([T]))[0], x)) / P - 1.0

    if lo >= hi or residual(lo) > 0:
        comp = int(np.argmax(components.t_min))
        raise TemperatureOutOfRange(
            components.records[comp].name, float(tb.min()),
            float(components.t_min[comp]), float(components.t_max[comp]),
        )
    if residual(hi) < 0:
        comp = int(np.argmin(components.t_max))
        raise TemperatureOutOfRange(
            components.records[comp].name, float(tb.max()),
            float(components.t_min[comp]), float(components.t_max[comp]),
        )

    try:
        T, info = brentq(residual, lo, hi, xtol=1e-12, maxiter=BUBBLE_MAX_ITER, full_output=True)
    except RuntimeError as exc:
        raise NoConvergence(f"bubble point at {P} kPa: {exc}", iterations=BUBBLE_MAX_ITER) from None
    if not info.converged:
        raise NoConvergence(f"bubble point at {P} kPa", residual(T), info.iterations)

    y = components.k_matrix(T, P)[0] * x
    return float(T), y


@dataclass(frozen=True)
class FlashResult:
    vapor_fraction: float  # molar, 0..1
    x: np.ndarray
    y: np.ndarray


def flash(z, T: float, P: float, components: ComponentSet) -> FlashResult:
    """Isothermal flash of feed z at (T, P), Rachford-Rice in the vapor fraction."""
    z = _check_composition(z, components, "z")
    K = components.k_matrix(T, P)[0]

    if np.dot(K, z) <= 1.0:
        # subcooled: all liquid, y is the incipient vapor
        y = K * z
        return FlashResult(0.0, z.copy(), y / y.sum())
    if np.dot(z, 1.0 / K) <= 1.0:
        x = z / K
        return FlashResult(1.0, x / x.sum(), z.copy())

    km1 = K - 1.0

    def rachford_rice(beta: float) -> float:
        return float(np.sum(z * km1 / (1.0 + beta * km1)))

    beta = brentq(rachford_rice, 0.0, 1.0, xtol=1e-15, maxiter=BUBBLE_MAX_ITER)
    x = z / (1.0 + beta * km1)
    return FlashResult(float(beta), x, K * x)


def load_components(path: Union[str, Path]) -> ComponentSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read component file {path}: {exc}") from None
    try:
        document = tomllib.loads(raw.decode("utf-8"))
        records = [ComponentRecord(**entry) for entry in document.get("component", [])]
    except (tomllib.TOMLDecodeError, ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None

    components = ComponentSet(records)
    logger.info(
        "Loaded %d components from %s (sha256 %s)",
        len(components), path, hashlib.sha256(raw).hexdigest(),
    )
    return components

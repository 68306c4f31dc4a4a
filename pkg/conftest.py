import math
from pathlib import Path

import numpy as np
import pytest

from column import Stream
from flowsheet import FlowsheetConfig, TrainDesign
from scenarios import find_scenario, load_scenarios, to_feed_stream
from thermo import AntoineCoefficients, ComponentRecord, ComponentSet, load_components

ROOT = Path(__file__).resolve().parent
COMPONENTS_FILE = ROOT / "data" / "components.toml"
SCENARIOS_FILE = ROOT / "data" / "scenarios.toml"
RUN_CONFIG = ROOT / "config" / "run.toml"

ALPHA = 2.5  # relative volatility of the binary surrogate


@pytest.fixture(scope="session")
def components() -> ComponentSet:
    return load_components(COMPONENTS_FILE)


@pytest.fixture(scope="session")
def scenarios(components):
    return load_scenarios(SCENARIOS_FILE, components)


@pytest.fixture(scope="session")
def base_feed(components, scenarios) -> Stream:
    return to_feed_stream(find_scenario(scenarios, "base"), components)


@pytest.fixture(scope="session")
def flowsheet_config() -> FlowsheetConfig:
    return FlowsheetConfig()


@pytest.fixture
def robust_design() -> TrainDesign:
    return TrainDesign(columns=(
        {"n_stages": 40, "feed_stage": 20, "diameter": 1.0},
        {"n_stages": 25, "feed_stage": 15, "diameter": 0.7},
        {"n_stages": 60, "feed_stage": 30, "diameter": 1.0},
    ))


def binary_record(name: str, A: float, is_product: bool = False) -> ComponentRecord:
    return ComponentRecord(
        name=name,
        molar_mass=100.0,
        antoine=AntoineCoefficients(A=A, B=1500.0, C=-50.0, t_min=250.0, t_max=500.0),
        heat_of_vaporization=35000.0,
        liquid_density=900.0,
        is_product=is_product,
        boiling_class="mid" if is_product else "high",
    )


@pytest.fixture(scope="session")
def binary() -> ComponentSet:
    """Two components with equal B and C, so psat_light / psat_heavy = ALPHA at every T."""
    return ComponentSet([
        binary_record("light", 6.0 + math.log10(ALPHA), is_product=True),
        binary_record("heavy", 6.0),
    ])


@pytest.fixture
def binary_feed(binary) -> Stream:
    return Stream(total_flow=100.0, composition=np.array([0.5, 0.5]), temperature=340.0, pressure=15.0)


def toy_record(name: str, relative_volatility: float, boiling_class: str, is_product: bool = False) -> ComponentRecord:
    return ComponentRecord(
        name=name,
        molar_mass=100.0,
        antoine=AntoineCoefficients(
            A=6.0 + math.log10(relative_volatility), B=1500.0, C=-50.0, t_min=250.0, t_max=500.0,
        ),
        heat_of_vaporization=35000.0,
        liquid_density=900.0,
        is_product=is_product,
        boiling_class=boiling_class,
    )


@pytest.fixture(scope="session")
def toy() -> ComponentSet:
    """Four components with constant relative volatilities 20 : 5 : 2.5 : 1."""
    return ComponentSet([
        toy_record("low", 20.0, "low"),
        toy_record("product", 5.0, "mid", is_product=True),
        toy_record("mid", 2.5, "mid"),
        toy_record("high", 1.0, "high"),
    ])


@pytest.fixture(scope="session")
def toy_flowsheet() -> FlowsheetConfig:
    return FlowsheetConfig(
        condenser_temperatures=(290.0, 290.0),
        product_component="product",
        degradation_temperature=400.0,
    )


@pytest.fixture
def toy_feed() -> Stream:
    return Stream(
        total_flow=10.0, composition=np.array([0.15, 0.4, 0.2, 0.25]), temperature=340.0, pressure=30.0,
    )


@pytest.fixture
def toy_design() -> TrainDesign:
    return TrainDesign(columns=(
        {"n_stages": 20, "feed_stage": 10, "diameter": 0.5},
        {"n_stages": 15, "feed_stage": 5, "diameter": 0.5},
        {"n_stages": 30, "feed_stage": 15, "diameter": 0.5},
    ))


def write_run_config(directory: Path, extra: str = "", **files: Path) -> Path:
    """A run.toml in `directory` pointing at the shipped data unless a file is overridden."""
    paths = {
        "components": COMPONENTS_FILE,
        "scenarios": SCENARIOS_FILE,
        "economics": ROOT / "config" / "economics.toml",
        "flowsheet": ROOT / "config" / "flowsheet.toml",
        **files,
    }
    lines = ["[files]"] + [f'{name} = "{Path(path).as_posix()}"' for name, path in paths.items()]
    path = directory / "run.toml"
    path.write_text(extra + "\n" + "\n".join(lines) + "\n")
    return path

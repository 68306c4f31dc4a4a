import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, Optional, Union

from decouple import config as env
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from economics import EconParams, load_econ
from errors import ConfigError, SchemaError
from evolution import ESConfig, Problem
from flowsheet import DesignBounds, FlowsheetConfig, OperatingPoint, TrainDesign
from localsearch import SearchConfig
from scenarios import load_scenarios
from thermo import load_components

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "runs"
DEFAULT_CONFIG = Path(__file__).resolve().parent / "config" / "run.toml"
MAX_DEFAULT_WORKERS = 8


def output_dir(override: Optional[str] = None) -> Path:
    """The --out flag wins, then OPTIMIZER_OUT_DIR, then ./runs."""
    if override:
        return Path(override)
    return Path(env("OPTIMIZER_OUT_DIR", default=DEFAULT_OUT_DIR))


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, MAX_DEFAULT_WORKERS))


def sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class DataFiles(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    components: Path
    scenarios: Path
    economics: Path
    flowsheet: Path


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: Path
    files: DataFiles
    evolution: ESConfig = Field(default_factory=ESConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    bounds: DesignBounds = Field(default_factory=DesignBounds)
    workers: Optional[int] = Field(None, ge=1)

    def checksums(self) -> Dict[str, str]:
        files = {"run": self.source, **{name: getattr(self.files, name) for name in DataFiles.model_fields}}
        return {name: sha256(path) for name, path in files.items()}

    def digest(self) -> str:
        """Fingerprint of every input a run depends on, seed excluded."""
        document = {
            "checksums": self.checksums(),
            "evolution": self.evolution.model_dump(exclude={"seed", "generations"}),
        }
        return hashlib.sha256(json.dumps(document, sort_keys=True).encode("utf-8")).hexdigest()


def _read_toml(path: Path, label: str) -> Dict:
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{label} file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {label} file {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def load_run_config(path: Union[str, Path] = DEFAULT_CONFIG) -> RunConfig:
    path = Path(path).resolve()
    document = _read_toml(path, "run configuration")
    files = document.get("files", {})
    if not isinstance(files, dict):
        raise SchemaError(f"{path}: [files] must be a table")
    document["files"] = {name: path.parent / value for name, value in files.items()}
    try:
        run = RunConfig(source=path, **document)
    except (ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None
    for name in DataFiles.model_fields:
        referenced = getattr(run.files, name)
        if not referenced.is_file():
            raise ConfigError(f"{name} file not found: {referenced}")
    return run


def load_flowsheet(path: Union[str, Path]) -> FlowsheetConfig:
    path = Path(path)
    document = _read_toml(path, "flowsheet")
    try:
        cfg = FlowsheetConfig(**document)
    except (ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None
    logger.info("Loaded flowsheet settings from %s (sha256 %s)", path, sha256(path))
    return cfg


def load_problem(run: RunConfig) -> Problem:
    components = load_components(run.files.components)
    flowsheet = load_flowsheet(run.files.flowsheet)
    econ: EconParams = load_econ(run.files.economics)
    scenarios = load_scenarios(run.files.scenarios, components)
    # the search box is the flowsheet's operating box unless the run file narrows it
    search = run.search
    if "bounds" not in run.search.model_fields_set:
        search = run.search.model_copy(update={"bounds": flowsheet.operating_bounds})
    try:
        components.index(flowsheet.product_component)
    except SchemaError:
        raise ConfigError(
            f"product component '{flowsheet.product_component}' is not in {run.files.components}"
        ) from None
    return Problem(
        components=components,
        scenarios=tuple(scenarios),
        flowsheet=flowsheet,
        econ=econ,
        search=search,
        bounds=run.bounds,
        checksums=run.checksums(),
    )


def load_design(path: Union[str, Path], problem: Problem) -> TrainDesign:
    """A fixed design file, checked against the design bounds before any simulation."""
    path = Path(path)
    document = _read_toml(path, "design")
    document.setdefault("pressures", problem.flowsheet.pressures)
    document.pop("label", None)
    try:
        design = TrainDesign(**document)
    except (ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None
    problem.bounds.validate_design(design)
    return design


def load_operating_point(path: Union[str, Path]) -> OperatingPoint:
    path = Path(path)
    document = _read_toml(path, "operating point")
    document.pop("label", None)
    try:
        return OperatingPoint(**document)
    except (ValidationError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None

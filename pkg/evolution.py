"""
Outer evolution strategy over discrete train designs.

A genome holds (stages, feed stage, diameter index) for each of the three
columns plus one self-adapted mutation strength per gene. Fitness is the
weighted mean over scenarios of the best annual profit the local search finds
for the decoded design.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from column import ColumnDesign
from economics import EconParams
from errors import CheckpointError, InitializationFailed, InvalidInput, PoolTooSmall, ResumeMismatch
from flowsheet import DesignBounds, FlowsheetConfig, TrainDesign, initialize_train
from localsearch import ScenarioOutcome, SearchConfig, SimulationContext, TrainObjective, search
from scenarios import DEFAULT_PENALTY_PROFIT, Scenario, to_feed_stream, weighted_fitness
from thermo import ComponentSet

logger = logging.getLogger(__name__)

N_GENES = 9
GENES_PER_COLUMN = 3


class ESConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    mu: int = Field(10, ge=1)
    lam: int = Field(40, ge=1, alias="lambda")
    elite_count: int = Field(3, ge=1)
    generations: int = Field(30, ge=0)
    seed: int = Field(1, ge=0)
    penalty_profit: float = DEFAULT_PENALTY_PROFIT  # EUR/y
    tau: Optional[float] = Field(None, gt=0)
    tau_prime: Optional[float] = Field(None, gt=0)
    sigma_min: float = Field(0.3, gt=0)
    sigma_max: float = Field(15.0, gt=0)
    sigma_init_fraction: float = Field(0.1, gt=0)  # of each gene's range
    selection_mode: Literal["elitist", "plus"] = "elitist"

    @model_validator(mode="after")
    def check_sizes(self):
        if self.elite_count > self.mu:
            raise ValueError(f"elite_count {self.elite_count} exceeds mu {self.mu}")
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min exceeds sigma_max")
        return self

    @property
    def local_rate(self) -> float:
        return self.tau if self.tau is not None else 1.0 / math.sqrt(2.0 * math.sqrt(N_GENES))

    @property
    def global_rate(self) -> float:
        return self.tau_prime if self.tau_prime is not None else 1.0 / math.sqrt(2.0 * N_GENES)


@dataclass(frozen=True)
class Genome:
    genes: Tuple[int, ...]  # n1, f1, d1, n2, f2, d2, n3, f3, d3 (d = diameter grid index)
    sigmas: Tuple[float, ...]

    def block(self, column: int) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
        s = slice(GENES_PER_COLUMN * column, GENES_PER_COLUMN * (column + 1))
        return self.genes[s], self.sigmas[s]

    def to_dict(self) -> Dict:
        return {"genes": list(self.genes), "sigmas": list(self.sigmas)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Genome":
        return cls(tuple(int(g) for g in data["genes"]), tuple(float(s) for s in data["sigmas"]))


@dataclass(frozen=True)
class Individual:
    genome: Genome
    birth_generation: int
    fitness: Optional[float] = None
    per_scenario: Tuple[ScenarioOutcome, ...] = field(default=(), compare=False)

    def to_dict(self) -> Dict:
        return {
            **self.genome.to_dict(),
            "birth_generation": self.birth_generation,
            "fitness": self.fitness,
            "per_scenario": [outcome.model_dump() for outcome in self.per_scenario],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Individual":
        return cls(
            genome=Genome.from_dict(data),
            birth_generation=int(data["birth_generation"]),
            fitness=data["fitness"],
            per_scenario=tuple(ScenarioOutcome(**o) for o in data.get("per_scenario", [])),
        )


def gene_bounds(bounds: DesignBounds) -> Tuple[np.ndarray, np.ndarray]:
    lower, upper = [], []
    for column in bounds.columns:
        d_lo, d_hi = column.diameter
        index_hi = int(round((d_hi - d_lo) / bounds.diameter_step))
        lower += [column.n_stages[0], column.feed_stage[0], 0]
        upper += [column.n_stages[1], column.feed_stage[1], index_hi]
    return np.array(lower), np.array(upper)


def repair(g: Genome, bounds: DesignBounds,
           sigma_range: Optional[Tuple[float, float]] = None) -> Genome:
    """Clip every gene to its bounds, then keep each feed stage at least `feed_margin` above the bottom."""
    lower, upper = gene_bounds(bounds)
    genes = np.clip(np.array(g.genes, dtype=int), lower, upper)
    for k, column in enumerate(bounds.columns):
        n, f = genes[3 * k], genes[3 * k + 1]
        f = min(f, n - bounds.feed_margin)
        genes[3 * k + 1] = max(f, column.feed_stage[0])
    sigmas = np.array(g.sigmas, dtype=float)
    if sigma_range is not None:
        sigmas = np.clip(sigmas, *sigma_range)
    return Genome(tuple(int(v) for v in genes), tuple(float(s) for s in sigmas))


def column_values(g: Genome, bounds: DesignBounds) -> List[Tuple[int, int, float]]:
    values = []
    for k, column in enumerate(bounds.columns):
        (n, f, index), _ = g.block(k)
        values.append((n, f, round(column.diameter[0] + bounds.diameter_step * index, 1)))
    return values


def decode(g: Genome, bounds: DesignBounds, pressures: Tuple[float, float, float]) -> TrainDesign:
    columns = tuple(
        ColumnDesign(n_stages=n, feed_stage=f, diameter=d) for n, f, d in column_values(g, bounds)
    )
    return TrainDesign(columns=columns, pressures=pressures)


def encode(design: TrainDesign, bounds: DesignBounds, sigmas: Optional[Sequence[float]] = None) -> Genome:
    genes = []
    for column, column_bounds in zip(design.columns, bounds.columns):
        index = int(round((column.diameter - column_bounds.diameter[0]) / bounds.diameter_step))
        genes += [column.n_stages, column.feed_stage, index]
    if sigmas is None:
        sigmas = [1.0] * N_GENES
    return Genome(tuple(genes), tuple(float(s) for s in sigmas))


def initial_sigmas(cfg: ESConfig, bounds: DesignBounds) -> np.ndarray:
    lower, upper = gene_bounds(bounds)
    return np.clip(cfg.sigma_init_fraction * (upper - lower), cfg.sigma_min, cfg.sigma_max)


def init_population(cfg: ESConfig, bounds: DesignBounds) -> List[Individual]:
    rng = np.random.default_rng([cfg.seed, 0, 0])
    lower, upper = gene_bounds(bounds)
    sigmas = tuple(float(s) for s in initial_sigmas(cfg, bounds))
    population = []
    for _ in range(cfg.mu):
        genes = rng.integers(lower, upper + 1)
        genome = repair(Genome(tuple(int(v) for v in genes), sigmas), bounds)
        population.append(Individual(genome=genome, birth_generation=0))
    return population


def recombine(p1: Genome, p2: Genome, rng: np.random.Generator) -> Genome:
    """Each column's whole gene block, strategy parameters included, comes from one parent."""
    genes: List[int] = []
    sigmas: List[float] = []
    for k in range(N_GENES // GENES_PER_COLUMN):
        donor = p1 if rng.random() < 0.5 else p2
        block_genes, block_sigmas = donor.block(k)
        genes += block_genes
        sigmas += block_sigmas
    return Genome(tuple(genes), tuple(sigmas))


def mutate(g: Genome, cfg: ESConfig, rng: np.random.Generator, bounds: DesignBounds) -> Genome:
    """Log-normal self-adaptation of the strengths, then rounded Gaussian steps, then repair."""
    common = rng.standard_normal()
    individual = rng.standard_normal(N_GENES)
    sigmas = np.array(g.sigmas) * np.exp(cfg.global_rate * common + cfg.local_rate * individual)
    sigmas = np.clip(sigmas, cfg.sigma_min, cfg.sigma_max)
    steps = np.rint(rng.normal(0.0, sigmas)).astype(int)
    genes = np.array(g.genes, dtype=int) + steps
    return repair(
        Genome(tuple(int(v) for v in genes), tuple(float(s) for s in sigmas)),
        bounds, (cfg.sigma_min, cfg.sigma_max),
    )


def _rank_key(individual: Individual):
    return (-individual.fitness, -individual.birth_generation, individual.genome.genes)


def select(parents: Sequence[Individual], offspring: Sequence[Individual], cfg: ESConfig) -> List[Individual]:
    if any(ind.fitness is None for ind in list(parents) + list(offspring)):
        raise InvalidInput("selection needs evaluated individuals")
    if cfg.selection_mode == "plus":
        pool = list(offspring) + list(parents)
    else:
        pool = list(offspring) + sorted(parents, key=_rank_key)[:cfg.elite_count]
    if len(pool) < cfg.mu:
        raise PoolTooSmall(f"selection pool of {len(pool)} cannot fill {cfg.mu} parent slots")
    return sorted(pool, key=_rank_key)[:cfg.mu]


# Fitness


@dataclass(frozen=True)
class Evaluation:
    fitness: float
    per_scenario: Tuple[ScenarioOutcome, ...] = ()
    simulator_calls: int = 0
    diagnostics: str = ""

    def to_payload(self) -> Dict:
        return {
            "per_scenario": [o.model_dump() for o in self.per_scenario],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_payload(cls, fitness: float, simulator_calls: int, payload: Dict) -> "Evaluation":
        return cls(
            fitness=fitness,
            per_scenario=tuple(ScenarioOutcome(**o) for o in payload.get("per_scenario", [])),
            simulator_calls=simulator_calls,
            diagnostics=payload.get("diagnostics", ""),
        )


@dataclass(frozen=True)
class Problem:
    """Everything a design evaluation needs, loaded once per run."""
    components: ComponentSet
    scenarios: Tuple[Scenario, ...]
    flowsheet: FlowsheetConfig
    econ: EconParams
    search: SearchConfig
    bounds: DesignBounds = field(default_factory=DesignBounds)
    checksums: Dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def weights(self) -> List[float]:
        return [s.weight for s in self.scenarios]

    @property
    def context(self) -> SimulationContext:
        return SimulationContext(self.components, self.flowsheet, self.econ)


class SimulationFitness:
    """
    Decode, initialize on the first scenario, then search every scenario with
    the previous scenario's optimum as its start point.
    """

    def __init__(self, problem: Problem, penalty_profit: float = DEFAULT_PENALTY_PROFIT,
                 initializer: Callable = initialize_train, objective_factory: Callable = TrainObjective):
        self.problem = problem
        self.penalty_profit = penalty_profit
        self.initializer = initializer
        self.objective_factory = objective_factory

    @property
    def call_budget(self) -> int:
        return len(self.problem.scenarios) * self.problem.search.max_evaluations

    def penalized(self, reason: str) -> Evaluation:
        outcomes = tuple(
            ScenarioOutcome(scenario_id=s.id, feasible=False, message=reason) for s in self.problem.scenarios
        )
        return Evaluation(self.penalty_profit, outcomes, 0, reason)

    def evaluate_design(self, design: TrainDesign) -> Evaluation:
        problem = self.problem
        context = problem.context
        first = problem.scenarios[0]
        try:
            init = self.initializer(
                design, to_feed_stream(first, problem.components), problem.components, problem.flowsheet,
            )
        except InitializationFailed as exc:
            logger.warning("Design %s penalized: %s", design.key()[:3], exc.detail)
            return self.penalized(exc.detail)

        x0, warm = init.operating, init.warm_starts
        profits: List[Optional[float]] = []
        outcomes: List[ScenarioOutcome] = []
        calls = 0
        for scenario in problem.scenarios:
            objective = self.objective_factory(design, scenario, context, warm)
            result = search(objective, problem.search, problem.search.bounds.clip(x0))
            calls += result.evaluations_used
            profits.append(result.best_profit if result.feasible else None)
            outcomes.append(result.outcome(scenario.id))
            if result.best_profit is not None:
                x0 = result.best_point
                if result.solution is not None and result.solution.feasible:
                    warm = result.solution.columns
        fitness = weighted_fitness(profits, problem.weights, self.penalty_profit)
        return Evaluation(fitness, tuple(outcomes), calls)

    def __call__(self, genome: Genome) -> Evaluation:
        return self.evaluate_design(decode(genome, self.problem.bounds, self.problem.flowsheet.pressures))


class SurrogateFitness:
    """Negative squared distance to a known genome; no simulator involved."""

    call_budget = 0

    def __init__(self, target: Sequence[int]):
        self.target = np.array(target, dtype=float)

    def __call__(self, genome: Genome) -> Evaluation:
        return Evaluation(-float(np.sum((np.array(genome.genes) - self.target) ** 2)))


def design_key(genes: Sequence[int]) -> str:
    return "|".join("-".join(str(v) for v in genes[i:i + 3]) for i in range(0, len(genes), 3))


class Evaluator:
    """
    Memoized fitness evaluation keyed on the design genes (strategy parameters
    excluded). Distinct new designs of one batch go to a process pool when
    `workers` > 1; results come back in submission order.
    """

    def __init__(self, fitness: Callable[[Genome], Evaluation], workers: int = 1, store=None):
        self.fitness = fitness
        self.workers = max(1, workers)
        self.store = store
        self.cache: Dict[Tuple[int, ...], Evaluation] = {}
        self.simulator_calls = 0
        self.cache_hits = 0
        self.evaluated = 0
        self._pool: Optional[ProcessPoolExecutor] = None

    def __enter__(self) -> "Evaluator":
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    @property
    def call_budget(self) -> int:
        return getattr(self.fitness, "call_budget", 0)

    def preload(self, generation: int) -> int:
        """Fill the cache from the persistent store up to and including `generation`."""
        if self.store is None:
            return 0
        for record in self.store.load_evaluations(max_generation=generation):
            genes = tuple(int(v) for v in record["design_key"].replace("|", "-").split("-"))
            self.cache[genes] = Evaluation.from_payload(
                record["fitness"], record["simulator_calls"], record["payload"],
            )
        return len(self.cache)

    def evaluate(self, genomes: Sequence[Genome], generation: int = 0) -> List[Evaluation]:
        todo: Dict[Tuple[int, ...], Genome] = {}
        for genome in genomes:
            if genome.genes in self.cache or genome.genes in todo:
                self.cache_hits += 1
            else:
                todo[genome.genes] = genome

        pending = list(todo.values())
        if self._pool is not None and len(pending) > 1:
            results = list(self._pool.map(self.fitness, pending))
        else:
            results = [self.fitness(genome) for genome in pending]

        for genome, evaluation in zip(pending, results):
            self.cache[genome.genes] = evaluation
            self.simulator_calls += evaluation.simulator_calls
            self.evaluated += 1
            if self.store is not None:
                self.store.store_evaluation(
                    design_key(genome.genes), generation, evaluation.fitness,
                    evaluation.simulator_calls, evaluation.to_payload(),
                )
        return [self.cache[genome.genes] for genome in genomes]


# Run bookkeeping


class TraceRow(BaseModel):
    generation: int
    best_fitness: float
    mean_fitness: float
    n1: int
    f1: int
    d1: float
    n2: int
    f2: int
    d2: float
    n3: int
    f3: int
    d3: float
    evaluations: int  # distinct designs simulated this generation
    cache_hits: int
    simulator_calls: int


@dataclass
class RunTrace:
    rows: List[TraceRow]
    parents: List[Individual]

    @property
    def best(self) -> Individual:
        return self.parents[0]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows])


def _trace_row(generation: int, parents: Sequence[Individual], bounds: DesignBounds,
               evaluations: int, cache_hits: int, simulator_calls: int) -> TraceRow:
    best = parents[0]
    values = {}
    for k, (n, f, d) in enumerate(column_values(best.genome, bounds), start=1):
        values.update({f"n{k}": n, f"f{k}": f, f"d{k}": d})
    return TraceRow(
        generation=generation,
        best_fitness=best.fitness,
        mean_fitness=math.fsum(ind.fitness for ind in parents) / len(parents),
        evaluations=evaluations,
        cache_hits=cache_hits,
        simulator_calls=simulator_calls,
        **values,
    )


class CheckpointStore:
    """JSON checkpoint rewritten atomically after every generation, plus population snapshots."""

    def __init__(self, directory: Path, config_digest: str, seed: int):
        self.directory = Path(directory)
        self.path = self.directory / "checkpoint.json"
        self.snapshots = self.directory / "snapshots"
        self.config_digest = config_digest
        self.seed = seed

    def exists(self) -> bool:
        return self.path.exists()

    def _write_json(self, path: Path, document: Dict) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "w", encoding="utf-8") as handle:
                json.dump(document, handle, indent=1, sort_keys=True)
            os.replace(tmp, path)
        except OSError as exc:
            raise CheckpointError(f"cannot write {path}: {exc}") from None

    def save(self, generation: int, parents: Sequence[Individual], rows: Sequence[TraceRow]) -> None:
        self._write_json(self.path, {
            "seed": self.seed,
            "config_digest": self.config_digest,
            "generation": generation,
            "parents": [ind.to_dict() for ind in parents],
            "trace": [row.model_dump() for row in rows],
        })

    def snapshot(self, generation: int, parents: Sequence[Individual],
                 offspring: Sequence[Individual] = ()) -> None:
        self._write_json(self.snapshots / f"population_g{generation:04d}.json", {
            "generation": generation,
            "parents": [ind.to_dict() for ind in parents],
            "offspring": [ind.to_dict() for ind in offspring],
        })

    def load(self) -> Tuple[int, List[Individual], List[TraceRow]]:
        try:
            with open(self.path, encoding="utf-8") as handle:
                document = json.load(handle)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {self.path}: {exc}") from None
        if document.get("seed") != self.seed:
            raise ResumeMismatch(f"checkpoint seed {document.get('seed')} differs from requested {self.seed}")
        if document.get("config_digest") != self.config_digest:
            raise ResumeMismatch("checkpoint was written with a different configuration")
        parents = [Individual.from_dict(d) for d in document["parents"]]
        rows = [TraceRow(**row) for row in document["trace"]]
        return int(document["generation"]), parents, rows


def _attach(individuals: Sequence[Individual], evaluations: Sequence[Evaluation]) -> List[Individual]:
    return [
        replace(ind, fitness=ev.fitness, per_scenario=ev.per_scenario)
        for ind, ev in zip(individuals, evaluations)
    ]


def _breed(parents: Sequence[Individual], cfg: ESConfig, bounds: DesignBounds, generation: int) -> List[Individual]:
    offspring = []
    for slot in range(cfg.lam):
        rng = np.random.default_rng([cfg.seed, generation, slot])
        if len(parents) > 1:
            i, j = rng.choice(len(parents), size=2, replace=False)
        else:
            i = j = 0
        child = recombine(parents[i].genome, parents[j].genome, rng)
        child = mutate(child, cfg, rng, bounds)
        offspring.append(Individual(genome=child, birth_generation=generation))
    return offspring


def _evaluate_batch(evaluator: Evaluator, individuals: Sequence[Individual], generation: int,
                    cfg: ESConfig) -> Tuple[List[Individual], Tuple[int, int, int]]:
    before = (evaluator.evaluated, evaluator.cache_hits, evaluator.simulator_calls)
    evaluations = evaluator.evaluate([ind.genome for ind in individuals], generation)
    counts = (
        evaluator.evaluated - before[0],
        evaluator.cache_hits - before[1],
        evaluator.simulator_calls - before[2],
    )
    assert counts[2] <= max(cfg.lam, cfg.mu) * evaluator.call_budget, "simulation budget exceeded"
    return _attach(individuals, evaluations), counts


def evolve(cfg: ESConfig, bounds: DesignBounds, evaluator: Evaluator,
           checkpoints: Optional[CheckpointStore] = None, resume: bool = False,
           on_generation: Optional[Callable[[TraceRow, List[Individual]], None]] = None) -> RunTrace:
    """
    Run the strategy for `cfg.generations` generations. The trace has one row
    per generation, the initial population included.
    """
    with evaluator:
        if resume and checkpoints is not None and checkpoints.exists():
            start, parents, rows = checkpoints.load()
            evaluator.preload(start)
            logger.info("Resuming from generation %d", start)
        else:
            population = init_population(cfg, bounds)
            parents, counts = _evaluate_batch(evaluator, population, 0, cfg)
            parents = sorted(parents, key=_rank_key)
            rows = [_trace_row(0, parents, bounds, *counts)]
            start = 0
            if checkpoints is not None:
                checkpoints.save(0, parents, rows)
                checkpoints.snapshot(0, parents)
            if on_generation is not None:
                on_generation(rows[-1], parents)
            logger.info("Generation 0: best %.6g, mean %.6g", rows[-1].best_fitness, rows[-1].mean_fitness)

        for generation in range(start + 1, cfg.generations + 1):
            offspring = _breed(parents, cfg, bounds, generation)
            offspring, counts = _evaluate_batch(evaluator, offspring, generation, cfg)
            previous_best = parents[0].fitness
            parents = select(parents, offspring, cfg)
            assert parents[0].fitness >= previous_best, "elitism violated"
            rows.append(_trace_row(generation, parents, bounds, *counts))
            if checkpoints is not None:
                checkpoints.save(generation, parents, rows)
                checkpoints.snapshot(generation, parents, offspring)
            if on_generation is not None:
                on_generation(rows[-1], parents)
            logger.info(
                "Generation %d: best %.6g, mean %.6g, %d new designs, %d cache hits",
                generation, rows[-1].best_fitness, rows[-1].mean_fitness, counts[0], counts[1],
            )

    return RunTrace(rows=rows, parents=list(parents))

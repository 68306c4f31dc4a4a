"""
Command line: optimize a train design, evaluate a fixed design, or simulate one operating point.

    python main.py optimize --config config/run.toml --seed 1 --out runs/seed1
    python main.py evaluate designs/robust.toml --out runs/robust
    python main.py simulate designs/robust.toml base designs/reference_operating.toml
"""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, ValidationError

from database import RunStore
from errors import ConfigError, NoConvergence, OptimizerError, ResumeMismatch
from evolution import (
    CheckpointStore,
    ESConfig,
    Evaluator,
    Problem,
    SimulationFitness,
    decode,
    design_key,
    evolve,
)
from flowsheet import TrainDesign, TrainSolution, check_specs, simulate_train
from scenarios import find_scenario, to_feed_stream
from settings import (
    DEFAULT_CONFIG,
    default_workers,
    load_design,
    load_operating_point,
    load_problem,
    load_run_config,
    output_dir,
)

logger = logging.getLogger(__name__)

VERSION = "1.0.0"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

OUTPUT_LAYOUT = {
    "manifest": "manifest.json",
    "trace": "trace.csv",
    "best_design": "best_design.json",
    "checkpoint": "checkpoint.json",
    "snapshots": "snapshots/population_gNNNN.json",
    "database": "run.db",
}


class RunManifest(BaseModel):
    version: str
    command: str
    config: str
    checksums: Dict[str, str]
    config_digest: str
    seed: int
    started_at: str
    output_dir: str
    layout: Dict[str, str]


def _write_json(path: Path, document) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_manifest(out: Path, manifest: RunManifest, resume: bool) -> None:
    path = out / OUTPUT_LAYOUT["manifest"]
    if resume and path.exists():
        recorded = json.loads(path.read_text(encoding="utf-8"))
        if recorded.get("config_digest") != manifest.config_digest:
            raise ResumeMismatch(f"{path} was written for a different configuration")
        return
    _write_json(path, manifest.model_dump())


def _design_report(design: TrainDesign) -> List[Dict]:
    return [column.model_dump() for column in design.columns]


# optimize


def cmd_optimize(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    es: ESConfig = run.evolution
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.generations is not None:
        updates["generations"] = args.generations
    if updates:
        try:
            es = ESConfig(**{**es.model_dump(), **updates})
        except ValidationError as exc:
            raise ConfigError(f"command-line overrides rejected: {exc}") from None
    workers = args.workers if args.workers is not None else (run.workers or default_workers())

    problem = load_problem(run)
    out = output_dir(args.out)
    digest = run.digest()
    checkpoints = CheckpointStore(out, digest, es.seed)
    if args.resume and not checkpoints.exists():
        raise ResumeMismatch(f"nothing to resume: no checkpoint in {out}")

    manifest = RunManifest(
        version=VERSION,
        command="optimize",
        config=str(run.source),
        checksums=problem.checksums,
        config_digest=digest,
        seed=es.seed,
        started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        output_dir=str(out.resolve()),
        layout=OUTPUT_LAYOUT,
    )
    _write_manifest(out, manifest, args.resume)

    store = RunStore(out / OUTPUT_LAYOUT["database"])
    if not args.resume:
        store.clear_evaluations()
        for stale in sorted((out / "snapshots").glob("population_g*.json")):
            stale.unlink()
    run_id = store.record_run(es.seed, digest, "optimize", manifest.model_dump())
    logger.info(
        "Optimizing with mu=%d lambda=%d for %d generations, seed %d, %d workers, output %s",
        es.mu, es.lam, es.generations, es.seed, workers, out,
    )

    def on_generation(row, parents):
        store.record_generation(run_id, row, design_key(parents[0].genome.genes))

    exit_code = 1
    try:
        evaluator = Evaluator(SimulationFitness(problem, es.penalty_profit), workers=workers, store=store)
        trace = evolve(es, problem.bounds, evaluator, checkpoints, resume=args.resume,
                       on_generation=on_generation)
        trace.to_frame().to_csv(out / OUTPUT_LAYOUT["trace"], index=False)

        best = trace.best
        design = decode(best.genome, problem.bounds, problem.flowsheet.pressures)
        _write_json(out / OUTPUT_LAYOUT["best_design"], {
            "design_key": design_key(best.genome.genes),
            "columns": _design_report(design),
            "pressures": list(design.pressures),
            "fitness": best.fitness,
            "birth_generation": best.birth_generation,
            "per_scenario": [outcome.model_dump() for outcome in best.per_scenario],
        })
        logger.info(
            "Best design %s, fitness %.6g EUR/y (%d distinct designs, %d simulations, %d cache hits)",
            design_key(best.genome.genes), best.fitness,
            evaluator.evaluated, evaluator.simulator_calls, evaluator.cache_hits,
        )
        exit_code = 0
    finally:
        store.finish_run(run_id, exit_code)
        store.close()
    return exit_code


# evaluate


def _evaluation_frame(problem: Problem, evaluation) -> pd.DataFrame:
    rows = []
    for scenario, outcome in zip(problem.scenarios, evaluation.per_scenario):
        operating = outcome.operating or {}
        residuals = [v["magnitude"] for v in outcome.violations]
        rows.append({
            "scenario": scenario.id,
            "weight": scenario.weight,
            "feasible": outcome.feasible,
            "profit": outcome.profit,
            "evaluations": outcome.evaluations,
            **{name: operating.get(name) for name in sorted(operating)},
            "max_violation": max(residuals) if residuals else 0.0,
            "violations": "; ".join(
                f"{v['kind']}" + (f"@c{v['column']}" if v["column"] is not None else "") + f"={v['magnitude']:.3g}"
                for v in outcome.violations
            ),
            "message": outcome.message,
        })
    rows.append({"scenario": "mean", "weight": 1.0, "profit": evaluation.fitness})
    return pd.DataFrame(rows)


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    problem = load_problem(run)
    design = load_design(args.design, problem)
    out = output_dir(args.out)

    fitness = SimulationFitness(problem, run.evolution.penalty_profit)
    logger.info("Evaluating %s over %d scenarios", args.design, len(problem.scenarios))
    evaluation = fitness.evaluate_design(design)

    frame = _evaluation_frame(problem, evaluation)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "evaluation.csv", index=False)
    _write_json(out / "evaluation.json", {
        "design": _design_report(design),
        "pressures": list(design.pressures),
        "checksums": problem.checksums,
        "fitness": evaluation.fitness,
        "simulator_calls": evaluation.simulator_calls,
        "diagnostics": evaluation.diagnostics,
        "per_scenario": [outcome.model_dump() for outcome in evaluation.per_scenario],
    })
    print(frame.to_string(index=False))
    for outcome in evaluation.per_scenario:
        logger.info("Scenario %s: feasible=%s profit=%s", outcome.scenario_id, outcome.feasible, outcome.profit)
    logger.info("Mean fitness %.6g EUR/y", evaluation.fitness)
    return 0


# simulate


def _stream_frame(sol: TrainSolution, problem: Problem) -> pd.DataFrame:
    components = problem.components
    streams = [("feed", sol.feed)]
    for k, column in enumerate(sol.columns, start=1):
        streams += [(f"c{k}_distillate", column.distillate), (f"c{k}_bottoms", column.bottoms)]
    rows = []
    for name, stream in streams:
        mass = components.mass_fractions(stream.composition)
        rows.append({
            "stream": name,
            "molar_flow": stream.total_flow,
            "mass_flow": stream.mass_flow(components),
            "temperature": stream.temperature,
            "pressure": stream.pressure,
            **{f"x_{c}": v for c, v in zip(components.names, stream.composition)},
            **{f"w_{c}": v for c, v in zip(components.names, mass)},
        })
    return pd.DataFrame(rows)


def cmd_simulate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    problem = load_problem(run)
    design = load_design(args.design, problem)
    scenario = find_scenario(problem.scenarios, args.scenario)
    op = load_operating_point(args.operating)
    out = output_dir(args.out)

    feed = to_feed_stream(scenario, problem.components)
    sol = simulate_train(design, op, feed, problem.components, problem.flowsheet)
    if not sol.feasible:
        failed = sol.columns[-1] if sol.columns else None
        residual = failed.residual if failed is not None else float("nan")
        iterations = failed.iterations if failed is not None else 0
        raise NoConvergence(
            f"column {sol.failed_column} did not converge: {'; '.join(sol.diagnostics)}",
            residual=residual, iterations=iterations,
        )

    frame = _stream_frame(sol, problem)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "streams.csv", index=False)
    balance = sol.balance_residual()
    _write_json(out / "simulation.json", {
        "scenario": scenario.id,
        "operating": op.model_dump(),
        "design": _design_report(design),
        "pressures": list(design.pressures),
        "streams": frame.to_dict(orient="records"),
        "columns": [
            {
                "reboiler_duty": c.reboiler_duty,
                "condenser_duty": c.condenser_duty,
                "reboiler_temperature": c.reboiler_temperature,
                "max_f_factor": c.max_f_factor,
                "min_f_factor": c.min_f_factor,
                "distillate_rate": c.distillate_rate,
                "iterations": c.iterations,
                "residual": c.residual,
            }
            for c in sol.columns
        ],
        "product_purity": sol.product_purity,
        "violations": [
            {"kind": v.kind, "column": v.column, "magnitude": v.magnitude, "detail": v.detail}
            for v in check_specs(sol, problem.flowsheet)
        ],
        "balance_residual": balance,
    })

    with pd.option_context("display.max_columns", None, "display.width", 200):
        print(frame.to_string(index=False))
    for k, column in enumerate(sol.columns, start=1):
        print(f"column {k}: Q_reb = {column.reboiler_duty:.6g} kW, Q_cond = {column.condenser_duty:.6g} kW")
    print(f"product purity {sol.product_purity:.6f} (mass fraction)")
    print(
        f"mass balance closure: max |feed - outlets| = {balance:.3e} kmol/h "
        f"({balance / feed.total_flow:.3e} of feed)"
    )
    return 0


def _bounded_int(minimum: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid integer: {text!r}") from None
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {value}")
        return value
    return parse


_positive_int = _bounded_int(1)
_non_negative_int = _bounded_int(0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Design optimization of a three-column aniline recovery train")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", default=str(DEFAULT_CONFIG), help="run configuration TOML")
        sub.add_argument("--out", default=None, help="output directory (env OPTIMIZER_OUT_DIR)")

    optimize = commands.add_parser("optimize", help="run the evolution strategy")
    common(optimize)
    optimize.add_argument("--seed", type=_non_negative_int, default=None, help="master seed")
    optimize.add_argument("--workers", type=_positive_int, default=None, help="process pool size (default: cores, at most 8)")
    optimize.add_argument("--resume", action="store_true", help="continue from checkpoint.json in the output dir")
    optimize.add_argument("--generations", type=_non_negative_int, default=None)
    optimize.set_defaults(handler=cmd_optimize)

    evaluate = commands.add_parser("evaluate", help="local search of a fixed design in every scenario")
    evaluate.add_argument("design", help="design TOML")
    common(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    simulate = commands.add_parser("simulate", help="one flowsheet simulation")
    simulate.add_argument("design", help="design TOML")
    simulate.add_argument("scenario", help="scenario id")
    simulate.add_argument("operating", help="operating point TOML")
    common(simulate)
    simulate.set_defaults(handler=cmd_simulate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.handler(args)
    except OptimizerError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.detail)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime, Text, ForeignKey
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import sessionmaker, relationship
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union
import json
import logging

logger = logging.getLogger(__name__)

Base = declarative_base()


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    seed = Column(Integer, nullable=False)
    config_digest = Column(String, nullable=False, index=True)
    command = Column(String, nullable=False)  # optimize, evaluate or simulate
    manifest = Column(Text, nullable=True)  # JSON copy of manifest.json
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)
    exit_code = Column(Integer, nullable=True)

    generations = relationship("Generation", back_populates="run")


class Generation(Base):
    __tablename__ = "generations"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    generation = Column(Integer, nullable=False)
    best_fitness = Column(Float, nullable=False)  # EUR/y
    mean_fitness = Column(Float, nullable=False)
    best_design = Column(String, nullable=False)  # design key of the best parent
    evaluations = Column(Integer, nullable=False)
    cache_hits = Column(Integer, nullable=False)
    simulator_calls = Column(Integer, nullable=False)
    recorded_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("Run", back_populates="generations")


class EvaluationRecord(Base):
    __tablename__ = "evaluations"

    # "n1-f1-d1|n2-f2-d2|n3-f3-d3" with d the diameter grid index
    design_key = Column(String, primary_key=True)
    generation = Column(Integer, nullable=False, index=True)  # generation of first evaluation
    fitness = Column(Float, nullable=False)
    simulator_calls = Column(Integer, nullable=False, default=0)
    payload = Column(Text, nullable=False)  # per-scenario outcomes as JSON


class RunStore:
    """SQLite run ledger and persistent evaluation cache of one output directory."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{self.path}", connect_args={"check_same_thread": False})
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        Base.metadata.create_all(bind=self.engine)

    def close(self) -> None:
        self.engine.dispose()

    def record_run(self, seed: int, config_digest: str, command: str, manifest: Optional[Dict] = None) -> int:
        db = self.SessionLocal()
        try:
            run = Run(
                seed=seed,
                config_digest=config_digest,
                command=command,
                manifest=json.dumps(manifest, sort_keys=True) if manifest is not None else None,
            )
            db.add(run)
            db.commit()
            db.refresh(run)
            return run.id
        finally:
            db.close()

    def finish_run(self, run_id: int, exit_code: int) -> None:
        db = self.SessionLocal()
        try:
            run = db.query(Run).filter(Run.id == run_id).first()
            if run is None:
                logger.warning("Run %d not in %s", run_id, self.path)
                return
            run.finished_at = datetime.utcnow()
            run.exit_code = exit_code
            db.commit()
        finally:
            db.close()

    def record_generation(self, run_id: int, row, best_design: str) -> None:
        db = self.SessionLocal()
        try:
            db.add(Generation(
                run_id=run_id,
                generation=row.generation,
                best_fitness=row.best_fitness,
                mean_fitness=row.mean_fitness,
                best_design=best_design,
                evaluations=row.evaluations,
                cache_hits=row.cache_hits,
                simulator_calls=row.simulator_calls,
            ))
            db.commit()
        finally:
            db.close()

    def generations(self, run_id: int) -> List[Generation]:
        db = self.SessionLocal()
        try:
            return (
                db.query(Generation)
                .filter(Generation.run_id == run_id)
                .order_by(Generation.generation)
                .all()
            )
        finally:
            db.close()

    def store_evaluation(self, design_key: str, generation: int, fitness: float,
                         simulator_calls: int, payload: Dict) -> None:
        db = self.SessionLocal()
        try:
            existing = db.query(EvaluationRecord).filter(EvaluationRecord.design_key == design_key).first()
            if existing is None:
                db.add(EvaluationRecord(
                    design_key=design_key,
                    generation=generation,
                    fitness=fitness,
                    simulator_calls=simulator_calls,
                    payload=json.dumps(payload, sort_keys=True),
                ))
            else:
                # a resumed run re-evaluates designs first seen after its checkpoint
                existing.generation = min(existing.generation, generation)
                existing.fitness = fitness
                existing.simulator_calls = simulator_calls
                existing.payload = json.dumps(payload, sort_keys=True)
            db.commit()
        finally:
            db.close()

    def clear_evaluations(self) -> int:
        """Drop the evaluation cache; a fresh run must not inherit results of another configuration."""
        db = self.SessionLocal()
        try:
            removed = db.query(EvaluationRecord).delete()
            db.commit()
            return removed
        finally:
            db.close()

    def load_evaluations(self, max_generation: Optional[int] = None) -> List[Dict]:
        db = self.SessionLocal()
        try:
            query = db.query(EvaluationRecord)
            if max_generation is not None:
                query = query.filter(EvaluationRecord.generation <= max_generation)
            return [
                {
                    "design_key": record.design_key,
                    "generation": record.generation,
                    "fitness": record.fitness,
                    "simulator_calls": record.simulator_calls,
                    "payload": json.loads(record.payload),
                }
                for record in query.order_by(EvaluationRecord.design_key).all()
            ]
        finally:
            db.close()

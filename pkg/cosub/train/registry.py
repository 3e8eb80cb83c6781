"""
Run registry: one SQLite row per finished training run, so seed sweeps
can be aggregated after their processes exit.
"""
import datetime
import re
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

from sqlalchemy import Column, DateTime, Float, Integer, String, select
from sqlalchemy.orm import declarative_base, declared_attr

from cosub.config import ExperimentConfig
from cosub.train.strategies import StrategyKind
from cosub.utils.db import Dbf, EnumCast

import logging
log = logging.getLogger(__name__)

REGISTRY_FILE = 'runs.sqlite3'

RunBase: Any = declarative_base(name='RunBase')


class ReprIt:
    def __repr__(self):
        vals = ', '.join(f'{c.name}={getattr(self, c.name)!r}'
                         for c in self.__table__.c)
        return f'<<table:{self.__tablename__} {vals}>>'


class NameIt:
    @declared_attr
    def __tablename__(cls):
        return re.sub(r'(?<!^)(?=[A-Z])', '_', cls.__name__).lower()


class Cdt:
    created_dt = Column(DateTime, nullable=False,
                        default=datetime.datetime.utcnow)


class TrainingRun(NameIt, ReprIt, Cdt, RunBase):
    run_id = Column(Integer, primary_key=True, autoincrement=True)
    config_key = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    strategy = Column(EnumCast(StrategyKind), nullable=False)
    lam = Column(Float, nullable=False)
    tau = Column(Float, nullable=False)
    epochs = Column(Integer, nullable=False)
    top1 = Column(Float, nullable=True)
    loss = Column(Float, nullable=True)
    out_dir = Column(String, nullable=False)


training_run = TrainingRun.__table__


class Summary(NamedTuple):
    config_key: str
    strategy: StrategyKind
    lam: float
    tau: float
    runs: int
    mean_top1: float
    min_top1: float
    max_top1: float
    seeds: List[int]


class RunRegistry:
    def __init__(self, path: Union[str, Path]) -> None:
        self.dbf = Dbf(RunBase.metadata, path)
        self.dbf.ensure_db()

    @classmethod
    def in_dir(cls, root: Union[str, Path]) -> 'RunRegistry':
        return cls(Path(root) / REGISTRY_FILE)

    def record(self, config: ExperimentConfig, final: Dict[str, Any],
               out_dir: Union[str, Path]) -> int:
        row = TrainingRun(
            config_key=config.key(), seed=config.seed,
            strategy=config.strategy.kind, lam=config.strategy.cosub.lam,
            tau=config.sd.tau, epochs=config.epochs,
            top1=final.get('top1'), loss=final.get('loss'),
            out_dir=str(out_dir))
        with self.dbf.session_scope() as session:
            session.add(row)
            session.flush()
            run_id = row.run_id
        log.debug('recorded run %d: %s seed %d top1 %s', run_id,
                  row.strategy.value, row.seed, row.top1)
        return run_id

    def runs(self, config_key: Optional[str] = None) -> List[TrainingRun]:
        q = select(TrainingRun)
        if config_key is not None:
            q = q.where(TrainingRun.config_key == config_key)
        q = q.order_by(TrainingRun.config_key, TrainingRun.seed,
                       TrainingRun.run_id)
        with self.dbf.session_scope() as session:
            return list(session.scalars(q))

    def aggregate(self) -> List[Summary]:
        """Per experiment, in key order; seeds in ascending order."""
        groups: Dict[str, List[TrainingRun]] = {}
        for run in self.runs():
            groups.setdefault(run.config_key, []).append(run)
        out = []
        for key, runs in groups.items():
            accs = [r.top1 for r in runs if r.top1 is not None]
            first = runs[0]
            out.append(Summary(
                key, first.strategy, first.lam, first.tau, len(runs),
                sum(accs) / len(accs) if accs else float('nan'),
                min(accs) if accs else float('nan'),
                max(accs) if accs else float('nan'),
                [r.seed for r in runs]))
        return out

    def close(self) -> None:
        self.dbf.dispose()

"""
Seed sweeps: one training run per seed under ``<root>/seed-<n>``,
optionally in worker processes. Results are recorded in seed order.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple, \
    Union

from cosub.config import ExperimentConfig, parse_config, to_text
from cosub.train.loop import run_experiment
from cosub.train.registry import RunRegistry

import logging
log = logging.getLogger(__name__)


class SeedRun(NamedTuple):
    seed: int
    out_dir: str
    final: Dict[str, Any]

    @property
    def checkpoint(self) -> Path:
        return Path(self.out_dir) / 'final.ckpt'

    @property
    def top1(self) -> float:
        return self.final.get('top1', float('nan'))


def _run_seed(job: Tuple[str, str, int]) -> SeedRun:
    text, root, seed = job
    config = parse_config(text).for_seed(seed)
    out = Path(root) / f'seed-{seed}'
    result = run_experiment(config, out)
    return SeedRun(seed, str(out), result.final)


def run_seeds(config: ExperimentConfig, seeds: Iterable[int],
              root: Union[str, Path, None] = None, workers: int = 1,
              registry: Optional[RunRegistry] = None) -> List[SeedRun]:
    """Workers receive the resolved config as text."""
    root = str(root if root is not None else config.out_dir)
    text = to_text(config)
    jobs = [(text, root, s) for s in sorted(set(seeds))]
    log.info('%s: %d seeds, %d workers', config.key(), len(jobs), workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_seed, jobs))
    else:
        done = [_run_seed(job) for job in jobs]
    if registry is not None:
        for run in done:
            registry.record(config.for_seed(run.seed), run.final, run.out_dir)
    return done

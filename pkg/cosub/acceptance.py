"""
Directional acceptance runs.

Trains the label-weight sweep (``lam_sweep_1_0``, ``lam_sweep_0_5``,
``lam_sweep_0_1``) and ``supervised_baseline`` from a configs
directory over a seed range, then checks:

  * mean top-1 at lam 0.5 is at least that at lam 1.0;
  * mean top-1 at lam 0.1 is strictly below that at lam 0.5;
  * the mean accuracy of sampled submodels of the lam 0.5 model beats
    the baseline model's for at least 4 of every 5 seeds.

>>> lam_sweep_checks({1.0: 0.80, 0.5: 0.82, 0.1: 0.61})[0]
Check(name='lam 0.5 >= lam 1.0', passed=True, detail='0.8200 vs 0.8000')
>>> population_check([0.7, 0.7, 0.7, 0.6, 0.7], [0.6] * 5).passed
True
>>> population_check([0.7, 0.7, 0.6, 0.6, 0.7], [0.6] * 5).detail
'cosub ahead in 3/5 seeds, need 4'
"""
import math
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from cosub.analysis import population_curve, population_mean_accuracy
from cosub.config import ExperimentConfig, load_config
from cosub.nn.checkpoint import load_checkpoint
from cosub.train.loop import load_datasets
from cosub.train.registry import RunRegistry
from cosub.train.sweep import SeedRun, run_seeds
from cosub.utils.fio import ensure_directory

import logging
log = logging.getLogger(__name__)

LAM_CONFIGS = {1.0: 'lam_sweep_1_0', 0.5: 'lam_sweep_0_5',
               0.1: 'lam_sweep_0_1'}
COSUB = 'lam_sweep_0_5'
BASELINE = 'supervised_baseline'
MIN_WIN_FRACTION = 0.8


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


class AcceptanceFailed(Exception):
    def __init__(self, failed: Sequence[Check]) -> None:
        self.failed = list(failed)
        super().__init__(', '.join(f'{c.name} ({c.detail})'
                                   for c in self.failed))


class AcceptanceReport(NamedTuple):
    checks: List[Check]
    mean_top1: Dict[str, float]
    population: Dict[str, List[float]]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def raise_if_failed(self) -> None:
        failed = [c for c in self.checks if not c.passed]
        if failed:
            raise AcceptanceFailed(failed)


def mean_top1(runs: Sequence[SeedRun]) -> float:
    return float(np.mean([r.top1 for r in runs]))


def lam_sweep_checks(means: Dict[float, float]) -> List[Check]:
    """``means`` maps the label weight to its mean top-1 over seeds."""
    hi, mid, lo = means[1.0], means[0.5], means[0.1]
    return [
        Check('lam 0.5 >= lam 1.0', mid >= hi, f'{mid:.4f} vs {hi:.4f}'),
        Check('lam 0.1 < lam 0.5', lo < mid, f'{lo:.4f} vs {mid:.4f}')]


def population_check(cosub: Sequence[float], baseline: Sequence[float],
                     min_fraction: float = MIN_WIN_FRACTION) -> Check:
    """Per seed population accuracies, paired by position."""
    if not cosub or len(cosub) != len(baseline):
        raise ValueError(f'need paired seeds: {len(cosub)} cosub, '
                         f'{len(baseline)} baseline')
    wins = sum(c > b for c, b in zip(cosub, baseline))
    need = math.ceil(min_fraction * len(cosub) - 1e-9)
    return Check('population cosub > baseline', wins >= need,
                 f'cosub ahead in {wins}/{len(cosub)} seeds, need {need}')


def population_accuracy(run: SeedRun, config: ExperimentConfig,
                        draws: int, tau: float) -> float:
    model = load_checkpoint(run.checkpoint, expect=config.model)
    _, test = load_datasets(config)
    curve = population_curve(model, tau, draws, test,
                             np.random.default_rng(run.seed))
    return population_mean_accuracy(curve)


def run_acceptance(configs_dir: Union[str, Path], seeds: Iterable[int],
                   root: Union[str, Path], overrides: Iterable[str] = (),
                   workers: int = 1, draws: int = 50) -> AcceptanceReport:
    """
    Every config trains under ``<root>/<config name>/seed-<n>``. The
    population comparison samples submodels at the lam 0.5 config's
    drop rate, with the same draws for both models of a seed.
    """
    seeds = sorted(set(seeds))
    overrides = list(overrides)
    root = Path(root)
    ensure_directory(root)
    trained: Dict[str, Tuple[ExperimentConfig, List[SeedRun]]] = {}
    registry = RunRegistry.in_dir(root)
    try:
        for name in list(LAM_CONFIGS.values()) + [BASELINE]:
            cfg = load_config(Path(configs_dir) / f'{name}.cfg', overrides)
            trained[name] = (cfg, run_seeds(cfg, seeds, root / name,
                                            workers, registry))
    finally:
        registry.close()
    means = {name: mean_top1(runs) for name, (_, runs) in trained.items()}
    checks = lam_sweep_checks({lam: means[name]
                               for lam, name in LAM_CONFIGS.items()})
    tau = trained[COSUB][0].sd.tau
    population = {
        name: [population_accuracy(r, trained[name][0], draws, tau)
               for r in trained[name][1]]
        for name in (COSUB, BASELINE)}
    checks.append(population_check(population[COSUB],
                                   population[BASELINE]))
    for c in checks:
        log.info('%s: %s (%s)', c.name, 'pass' if c.passed else 'FAIL',
                 c.detail)
    return AcceptanceReport(checks, means, population)

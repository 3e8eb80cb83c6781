import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from cosub import analysis
from cosub.acceptance import AcceptanceFailed, run_acceptance
from cosub.bench import run_bench
from cosub.config import ConfigError, ExperimentConfig, load_config
from cosub.dataio import IdxFormatError
from cosub.nn.blocks import Model
from cosub.nn.checkpoint import CheckpointError, load_checkpoint
from cosub.nn.sdepth import quantization_table
from cosub.train.loop import TrainingDiverged, evaluate, load_datasets, \
    run_experiment
from cosub.train.registry import RunRegistry
from cosub.train.sweep import run_seeds
from cosub.utils import parse_range, print_pad
from cosub.utils.args import CommandArgs, Repeat, Switch
from cosub.utils.fio import dump_csv, ensure_directory, write_csv

import logging
log = logging.getLogger(__name__)

ca = CommandArgs()

MODES = ('population', 'ablate-one', 'count', 'linear-check')
CONFIG = 'experiment config file. '
SET = ('override a config key, as key=value. ', Repeat)


def _load_model(checkpoint: str, config: ExperimentConfig) -> Model:
    return load_checkpoint(checkpoint, expect=config.model)


@ca.app('cosub: submodel co-training with stochastic depth')
class CosubApp:

    @ca.command(debug=('set logging level to DEBUG. default is INFO',
                       Switch))
    def __init__(self, debug=False):
        level = logging.DEBUG if debug else logging.INFO
        logging.basicConfig(level=level)
        if debug:
            for l in ('sqlalchemy.engine', 'sqlalchemy.orm'):
                logging.getLogger(l).setLevel(logging.INFO)

    @ca.command('train a model; --seeds fans out one process per seed',
                config=CONFIG, set=SET,
                seeds='seed range a..b or list a,b,c. ',
                out='output directory, overrides out_dir. ',
                workers=('parallel processes for --seeds. ', int))
    def train(self, config, set=(), seeds=None, out=None, workers=1):
        cfg = load_config(config, set)
        if out is not None:
            cfg = replace(cfg, out_dir=out)
        root = Path(cfg.out_dir)
        ensure_directory(root)
        registry = RunRegistry.in_dir(root)
        try:
            if seeds is None:
                result = run_experiment(cfg, root)
                registry.record(cfg, result.final, root)
                print_pad([result.final], sorted(result.final))
                return result
            run_seeds(cfg, parse_range(seeds), root, workers, registry)
            summary = [s for s in registry.aggregate()
                       if s.config_key == cfg.key()]
            print_pad(summary, ('strategy', 'lam', 'tau', 'runs',
                                'mean_top1', 'min_top1', 'max_top1'),
                      lambda r, c: getattr(r, c).value
                      if c == 'strategy' else getattr(r, c))
            return summary
        finally:
            registry.close()

    @ca.command('accuracy of a checkpoint on the configured test split',
                checkpoint='model checkpoint. ', config=CONFIG, set=SET)
    def eval(self, checkpoint, config, set=()):
        cfg = load_config(config, set)
        model = _load_model(checkpoint, cfg)
        _, test = load_datasets(cfg)
        result = evaluate(model, test,
                          kind=cfg.strategy.cosub.label_loss_kind)
        print_pad([result._asdict()], ('top1', 'loss', 'count'))
        return result

    @ca.command('submodel analyses, written as CSV',
                mode=('analysis to run. ', str, MODES),
                checkpoint='model checkpoint (population, ablate-one). ',
                config=CONFIG, set=SET,
                layers=('residual blocks (count, linear-check). ', int),
                tau=('drop rate. ', float),
                draws=('sampled submodels (population). ', int),
                scaled=('scale kept residuals by 1/(1-tau). ', Switch),
                ablate=('removal unit (ablate-one). ', str,
                        ('pair', 'residual')),
                nonlinear=('use nonlinear blocks (linear-check). ',
                           Switch),
                width=('block width (linear-check). ', int),
                seed=('random seed. ', int),
                out='CSV output path. ')
    def analyze(self, mode, checkpoint=None, config=None, set=(),
                layers=8, tau=0.2, draws=50, scaled=False, ablate='pair',
                nonlinear=False, width=16, seed=0, out=None):
        if mode == 'count':
            rows = analysis.submodel_histogram(layers)
            if out is not None:
                analysis.write_count_csv(out, layers)
            print_pad(rows, (0, 1))
            return rows
        if mode == 'linear-check':
            deviation = analysis.linear_average_check(
                layers, width, tau, seed, nonlinear=nonlinear)
            print(f'deviation: {deviation:.3e}')
            return deviation
        if checkpoint is None or config is None:
            raise ConfigError('checkpoint', f'{mode} needs --checkpoint '
                                            f'and --config')
        cfg = load_config(config, set)
        model = _load_model(checkpoint, cfg)
        _, test = load_datasets(cfg)
        if mode == 'population':
            curve = analysis.population_curve(
                model, tau, draws, test, np.random.default_rng(seed), scaled)
            if out is not None:
                analysis.write_population_csv(out, curve)
            print_pad(curve, ('layers_kept', 'mean_top1', 'count'), getattr)
            return curve
        accs = analysis.ablate_single_block(model, test, ablate)
        full = evaluate(model, test).top1
        if out is not None:
            analysis.write_ablation_csv(out, accs, full)
        print_pad(list(enumerate(accs)), (0, 1))
        return accs

    @ca.command('effective drop rate staircase for a batch size',
                batch_size=('per-device batch size. ', int),
                floor=('count dropped rows as floor(tau * B). ', Switch),
                out='CSV output path. ')
    def quantization(self, batch_size, floor=False, out=None):
        if batch_size < 1:
            raise ConfigError('batch_size', f'must be >= 1, got '
                                            f'{batch_size}')
        table = quantization_table(batch_size, floor_dropped=floor)
        header = ['requested_tau', 'effective_tau', 'batch_size']
        if out is not None:
            write_csv(out, header, table)
        else:
            dump_csv(sys.stdout, header, table)
        plateaus = len({e for _, e, _ in table})
        log.info('B=%d: %d plateaus', batch_size, plateaus)
        return table

    @ca.command('naive versus efficient stochastic depth timing',
                width=('block width. ', int),
                depth=('residual blocks. ', int),
                batch=('batch size. ', int),
                tau=('drop rate. ', float),
                repeats=('timed repetitions. ', int),
                out='JSON report path. ')
    def bench(self, width=256, depth=12, batch=128, tau=0.5, repeats=5,
              out=None):
        report = run_bench(width, depth, batch, tau, repeats)
        text = json.dumps(report, indent=2, sort_keys=True)
        if out is not None:
            Path(out).write_text(text + '\n')
        print(text)
        return report

    @ca.command('train the lam sweep and the baseline, then check '
                'the directional results',
                configs='directory with the lam_sweep_* and '
                        'supervised_baseline configs. ',
                seeds='seed range a..b or list a,b,c. ',
                out='output root. ', set=SET,
                workers=('parallel processes per config. ', int),
                draws=('sampled submodels per model. ', int))
    def acceptance(self, configs='configs', seeds='0..4',
                   out='runs/acceptance', set=(), workers=1, draws=50):
        report = run_acceptance(configs, parse_range(seeds), out, set,
                                workers, draws)
        print_pad(report.checks, ('name', 'passed', 'detail'), getattr)
        report.raise_if_failed()
        return report


def main(args: Optional[List[str]] = None) -> int:
    try:
        ca.main(args)
    except ConfigError as e:
        print(f'configuration error: {e}', file=sys.stderr)
        return 2
    except (CheckpointError, IdxFormatError, TrainingDiverged,
            AcceptanceFailed) as e:
        print(f'{type(e).__name__}: {e}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())

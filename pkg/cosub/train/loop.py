"""
Epoch loop around the strategy steps.

A run directory receives::

    config.cfg       resolved configuration, reproduces the run
    dataset.json     provenance of the training data
    metrics.jsonl    one row per epoch, byte-identical across reruns
    timings.jsonl    wall-clock seconds per epoch
    final.ckpt       the trained model
    last_good.ckpt   only after divergence: the model before the bad step

Evaluation always uses the full model: every block, unscaled.
"""
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from cosub.config import ExperimentConfig, to_text
from cosub.dataio import (
    AugmentPolicy, Dataset, gen_synthetic, load_idx,
    make_cosub_batches)
from cosub.nn.blocks import Model, build_model, forward
from cosub.nn.checkpoint import save_checkpoint
from cosub.nn.losses import LabelKind, label_loss
from cosub.nn.optim import NonFiniteError, lr_at
from cosub.train.strategies import StrategyKind, TrainState, init_state, \
    run_step
from cosub.utils.fio import JsonlWriter, dumps_line, ensure_directory, \
    ensure_path

import logging
log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: Optional[Path],
                 epoch: int, step: int) -> None:
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.epoch = epoch
        self.step = step


class EvalResult(NamedTuple):
    top1: float
    loss: float
    count: int


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500,
             kind: LabelKind = LabelKind.ce) -> EvalResult:
    """Top-1 accuracy and mean label loss of the full model."""
    correct = 0
    loss = 0.0
    for start in range(0, len(dataset), batch_size):
        x = dataset.samples[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = forward(model, x)
        correct += int((logits.data.argmax(axis=-1) == y).sum())
        loss += label_loss(logits, y, kind).item() * len(y)
    n = len(dataset)
    return EvalResult(correct / n, loss / n, n)


def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = config.data
    if d.uses_idx:
        train = load_idx(str(d.train_images), str(d.train_labels),
                         config.model.num_classes)
        test = load_idx(str(d.test_images), str(d.test_labels),
                        config.model.num_classes)
        return train, test
    full = gen_synthetic(d.kind, d.n_train + d.n_test, d.dims, d.classes,
                         d.noise, d.seed, d.separation)
    return full.split(d.n_test)


def build_for(config: ExperimentConfig) -> Model:
    return build_model(config.model, dtype=np.dtype(config.dtype))


@dataclass
class RunResult:
    out_dir: Path
    metrics: List[Dict[str, Any]]
    state: TrainState
    checkpoint: Path

    @property
    def final(self) -> Dict[str, Any]:
        return self.metrics[-1]


def _eval_row(state: TrainState, test: Dataset, kind: LabelKind,
              strategy: StrategyKind) -> Dict[str, Any]:
    ev = evaluate(state.model, test, kind=kind)
    row: Dict[str, Any] = {'eval_split': test.meta.get('split', 'test'),
                           'top1': ev.top1, 'eval_loss': ev.loss}
    if strategy == StrategyKind.mean_teacher and state.teacher is not None:
        row['teacher_top1'] = evaluate(state.teacher, test, kind=kind).top1
    if state.peer is not None:
        row['peer_top1'] = evaluate(state.peer, test, kind=kind).top1
    return row


def train_loop(config: ExperimentConfig, train: Dataset, test: Dataset,
               out_dir: Union[str, Path, None] = None,
               model: Optional[Model] = None,
               teacher: Optional[Model] = None,
               peer: Optional[Model] = None) -> RunResult:
    """
    Trains ``config.epochs`` epochs of ``len(train) // batch_size``
    steps. A non-finite loss or gradient stops the run before any
    parameter is modified; the untouched model is written to
    ``last_good.ckpt`` and :class:`TrainingDiverged` is raised.
    """
    out = ensure_path(out_dir if out_dir is not None else config.out_dir)
    ensure_directory(out)
    (out / 'config.cfg').write_text(to_text(config))
    (out / 'dataset.json').write_text(dumps_line(train.meta) + '\n')
    if model is None:
        model = build_for(config)
    state = init_state(model, config.strategy, config.optim, config.seed,
                       teacher=teacher, peer=peer)
    kind = config.strategy.cosub.label_loss_kind
    opt = config.optim
    data_rng = np.random.default_rng([config.seed, 1])
    policy = AugmentPolicy.parse(config.data.augment)
    per_epoch = len(train) // opt.batch_size
    total = config.epochs * per_epoch
    warmup = opt.warmup_epochs * per_epoch
    peak = opt.peak_lr()
    log.info('%s: %d epochs x %d steps, peak lr %g, tau %g, %s',
             config.strategy.kind.value, config.epochs, per_epoch, peak,
             config.sd.tau, state.storage())
    metrics: List[Dict[str, Any]] = []
    with JsonlWriter(out / 'metrics.jsonl') as mw, \
            JsonlWriter(out / 'timings.jsonl') as tw:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            sums: Dict[str, float] = defaultdict(float)
            lr = peak
            for batch in make_cosub_batches(train, opt.batch_size, False,
                                            data_rng, policy):
                lr = lr_at(state.steps, total, warmup, peak, opt.schedule,
                           opt.min_lr)
                try:
                    bundle = run_step(state, batch, config.sd,
                                      config.strategy, lr)
                except NonFiniteError as e:
                    path = save_checkpoint(out / 'last_good.ckpt',
                                           state.model)
                    log.error('diverged at epoch %d step %d: %s; last good '
                              'model in %s', epoch, state.steps, e, path)
                    raise TrainingDiverged(str(e), path, epoch,
                                           state.steps) from e
                for k, v in bundle.values().items():
                    sums[k] += v
            row: Dict[str, Any] = {k: v / per_epoch for k, v in sums.items()}
            row.update(epoch=epoch, lr=lr, steps=state.steps)
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                row.update(_eval_row(state, test, kind,
                                      config.strategy.kind))
            mw.write(row)
            seconds = time.perf_counter() - started
            tw.write({'epoch': epoch, 'seconds': seconds})
            metrics.append(row)
            state.history.append(row)
            state.epoch = epoch
            log.info('epoch %d/%d loss %.4f top1 %s (%.1fs)', epoch,
                     config.epochs, row['loss'], row.get('top1'), seconds)
    ckpt = save_checkpoint(out / 'final.ckpt', state.model)
    return RunResult(out, metrics, state, ckpt)


def run_experiment(config: ExperimentConfig,
                   out_dir: Union[str, Path, None] = None) -> RunResult:
    train, test = load_datasets(config)
    return train_loop(config, train, test, out_dir)

import numpy as np
import pytest

from cosub.tests import TestSetup
from cosub.config import parse_config
from cosub.dataio import Dataset
from cosub.nn.checkpoint import load_checkpoint
from cosub.train.loop import (
    TrainingDiverged, build_for, evaluate, load_datasets, run_experiment,
    train_loop)
from cosub.utils.fio import read_jsonl

test = TestSetup(__name__, ensure_empty=True)
log = test.log

SMALL = [
    'data.n_train=200', 'data.n_test=60', 'data.dims=6', 'data.classes=3',
    'data.noise=0.8', 'model.input_dim=6', 'model.num_classes=3',
    'model.width=16', 'model.depth=3', 'optim.batch_size=40',
    'optim.base_lr=0.003', 'optim.warmup_epochs=1', 'epochs=3',
    'sd.tau=0.3',
]


def _config(*extra):
    return parse_config('', SMALL + list(extra))


def test_metrics_rows_and_artifacts():
    config = _config('eval_every=2')
    out = test.subdir('artifacts')
    result = run_experiment(config, out)
    rows = read_jsonl(f'{out}/metrics.jsonl')
    assert len(rows) == config.epochs == len(result.metrics)
    assert [r['epoch'] for r in rows] == [1, 2, 3]
    assert [r['steps'] for r in rows] == [5, 10, 15]
    assert 'top1' not in rows[0]
    assert rows[1]['eval_split'] == rows[2]['eval_split'] == 'test'
    for r in rows:
        assert {'loss', 'label_loss', 'cosub_loss', 'lr'} <= set(r)
        assert np.isfinite(r['loss'])
    assert result.final == rows[-1]
    assert len(read_jsonl(f'{out}/timings.jsonl')) == 3
    with open(f'{out}/config.cfg') as fp:
        assert parse_config(fp.read()) == config
    model = load_checkpoint(result.checkpoint, expect=config.model)
    _, held = load_datasets(config)
    assert evaluate(model, held).top1 == rows[-1]['top1']


def test_reruns_write_identical_metrics():
    config = _config('strategy.kind=cosub', 'data.augment=flip+noise(0.1)')
    runs = []
    for name in ('a', 'b'):
        out = test.subdir(f'rerun-{name}')
        run_experiment(config, out)
        with open(f'{out}/metrics.jsonl', 'rb') as fp:
            runs.append(fp.read())
    assert runs[0] == runs[1]
    other = test.subdir('rerun-seed')
    run_experiment(config.for_seed(1), other)
    with open(f'{other}/metrics.jsonl', 'rb') as fp:
        assert fp.read() != runs[0]


def test_strategy_specific_columns():
    rows = run_experiment(_config('strategy.kind=mean-teacher',
                                  'strategy.ema_momentum=0.5', 'epochs=1'),
                          test.subdir('mt')).metrics
    assert 0 <= rows[0]['teacher_top1'] <= 1
    rows = run_experiment(_config('strategy.kind=cotrain', 'epochs=1'),
                          test.subdir('ct')).metrics
    assert 0 <= rows[0]['peer_top1'] <= 1
    assert 'teacher_top1' not in rows[0]


def test_kd_loads_teacher_checkpoint():
    teacher = run_experiment(_config('strategy.kind=supervised', 'epochs=1'),
                             test.subdir('teacher'))
    config = _config('strategy.kind=kd+cosub', 'epochs=1',
                     f'strategy.teacher_checkpoint={teacher.checkpoint}')
    result = run_experiment(config, test.subdir('kd'))
    assert result.state.teacher is not None
    assert len(result.metrics) == 1


def test_memorizes_a_small_training_set():
    config = parse_config('', [
        'data.n_train=40', 'data.n_test=10', 'data.dims=20',
        'data.classes=4', 'data.noise=1.0', 'model.input_dim=20',
        'model.num_classes=4', 'model.width=32', 'model.depth=2',
        'strategy.kind=supervised', 'cosub.label_kind=ce',
        'optim.batch_size=20', 'optim.base_lr=0.01',
        'optim.schedule=constant', 'optim.warmup_epochs=0',
        'optim.weight_decay=0', 'epochs=150', 'eval_every=150'])
    train, _ = load_datasets(config)
    result = train_loop(config, train, train, test.subdir('memorize'))
    assert result.final['top1'] == 1.0
    assert result.final['eval_split'] == 'train'
    assert evaluate(result.state.model, train).top1 == 1.0


def test_divergence_keeps_last_good_model():
    config = _config('optim.batch_size=200', 'strategy.kind=supervised')
    train, held = load_datasets(config)
    samples = train.samples.copy()
    samples[17] = np.nan
    poisoned = Dataset(samples, train.labels, train.num_classes, train.meta)
    out = test.subdir('diverge')
    with pytest.raises(TrainingDiverged) as e:
        train_loop(config, poisoned, held, out)
    assert (e.value.epoch, e.value.step) == (1, 0)
    assert e.value.checkpoint.name == 'last_good.ckpt'
    saved = load_checkpoint(e.value.checkpoint)
    initial = build_for(config)
    for a, b in zip(saved.tensors(), initial.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert read_jsonl(f'{out}/metrics.jsonl') == []

import json
import os

import numpy as np

from cosub.tests import TestSetup, seeded
from cosub.cli import main
from cosub.dataio import write_idx_arrays
from cosub.train.registry import RunRegistry
from cosub.utils.fio import read_csv, read_jsonl

test = TestSetup(__name__, ensure_empty=True)
log = test.log

TOY = '''\
# desk-sized cosub run
model.width = 16
model.depth = 4
model.input_dim = 6
model.num_classes = 3
data.n_train = 120
data.n_test = 40
data.dims = 6
data.classes = 3
strategy.kind = cosub
cosub.lam = 0.5
sd.tau = 0.25
optim.batch_size = 30
optim.base_lr = 0.003
optim.warmup_epochs = 0
epochs = 2
'''


def _toy_config():
    path = test.file_path('cosub_toy.cfg')
    if not os.path.exists(path):
        with open(path, 'w') as fp:
            fp.write(TOY)
    return path


def _train(out, *extra):
    return main(['train', '--config', _toy_config(), '--out', out] +
                list(extra))


def test_train_writes_artifacts():
    out = test.subdir('train')
    assert _train(out, '--set', 'seed=1') == 0
    rows = read_jsonl(os.path.join(out, 'metrics.jsonl'))
    assert len(rows) == 2
    for name in ('final.ckpt', 'config.cfg', 'dataset.json',
                 'timings.jsonl', 'runs.sqlite3'):
        assert os.path.exists(os.path.join(out, name)), name
    with open(os.path.join(out, 'config.cfg')) as fp:
        assert 'seed = 1\n' in fp.read()


def test_same_config_and_seed_give_identical_metrics():
    texts = []
    for name in ('same-a', 'same-b'):
        out = test.subdir(name)
        assert _train(out) == 0
        with open(os.path.join(out, 'metrics.jsonl'), 'rb') as fp:
            texts.append(fp.read())
    assert texts[0] == texts[1]


def test_bad_config_exits_2_naming_the_field(capsys):
    out = test.subdir('bad')
    assert _train(out, '--set', 'strategy.kind=telepathy') == 2
    assert 'strategy.kind' in capsys.readouterr().err
    assert _train(out, '--set', 'sd.tau=1.5') == 2
    assert 'sd.tau' in capsys.readouterr().err


def test_seed_sweep_is_aggregated_in_seed_order(capsys):
    out = test.subdir('sweep')
    assert _train(out, '--seeds', '0..2', '--set', 'epochs=1') == 0
    for seed in range(3):
        assert len(read_jsonl(os.path.join(out, f'seed-{seed}',
                                           'metrics.jsonl'))) == 1
    registry = RunRegistry.in_dir(out)
    runs = registry.runs()
    assert [r.seed for r in runs] == [0, 1, 2]
    assert len({r.config_key for r in runs}) == 1
    registry.close()
    assert 'cosub' in capsys.readouterr().out


def test_eval_and_analyze_checkpoint(capsys):
    out = test.subdir('analyze')
    assert _train(out) == 0
    ckpt = os.path.join(out, 'final.ckpt')
    capsys.readouterr()
    assert main(['eval', '--checkpoint', ckpt, '--config',
                 _toy_config()]) == 0
    top1, loss, count = capsys.readouterr().out.split()
    assert 0 <= float(top1) <= 1 and count == '40'
    pop = os.path.join(out, 'population.csv')
    assert main(['analyze', '--mode', 'population', '--checkpoint', ckpt,
                 '--config', _toy_config(), '--tau', '0.2', '--draws', '50',
                 '--out', pop]) == 0
    rows = read_csv(pop)
    assert 1 <= len(rows) <= 5
    assert sum(int(r['count']) for r in rows) == 50
    abl = os.path.join(out, 'ablate.csv')
    assert main(['analyze', '--mode', 'ablate-one', '--checkpoint', ckpt,
                 '--config', _toy_config(), '--ablate', 'residual',
                 '--out', abl]) == 0
    assert len(read_csv(abl)) == 4
    assert main(['analyze', '--mode', 'population', '--checkpoint', ckpt,
                 '--config', _toy_config(), '--set',
                 'model.width=32']) == 1
    assert 'CheckpointError' in capsys.readouterr().err
    assert main(['analyze', '--mode', 'population']) == 2


def test_tiny_vit_checkpoint_evaluates_with_its_config(capsys):
    rng = seeded(5)
    paths = {}
    for split, n in (('train', 40), ('test', 20)):
        images = rng.integers(0, 256, (n, 8, 8), dtype=np.uint8)
        labels = (np.arange(n) % 2).astype(np.uint8)
        paths[split] = (test.file_path(f'vit-{split}-images.idx'),
                        test.file_path(f'vit-{split}-labels.idx'))
        write_idx_arrays(images, labels, *paths[split])
    config = test.file_path('vit.cfg')
    with open(config, 'w') as fp:
        fp.write(f'''\
model.kind = tiny-vit
model.image_size = 8
model.patch_size = 4
model.width = 8
model.depth = 1
model.heads = 2
model.num_classes = 2
data.train_images = {paths['train'][0]}
data.train_labels = {paths['train'][1]}
data.test_images = {paths['test'][0]}
data.test_labels = {paths['test'][1]}
sd.tau = 0.5
optim.batch_size = 20
optim.warmup_epochs = 0
epochs = 1
''')
    out = test.subdir('vit')
    assert main(['train', '--config', config, '--out', out]) == 0
    capsys.readouterr()
    ckpt = os.path.join(out, 'final.ckpt')
    assert main(['eval', '--checkpoint', ckpt, '--config', config]) == 0
    captured = capsys.readouterr()
    assert 'CheckpointError' not in captured.err
    assert captured.out.split()[-1] == '20'
    assert main(['analyze', '--mode', 'ablate-one', '--checkpoint', ckpt,
                 '--config', config, '--ablate', 'residual']) == 0


def test_analyze_count(capsys):
    out = test.file_path('count.csv')
    assert main(['analyze', '--mode', 'count', '--layers', '64',
                 '--out', out]) == 0
    rows = read_csv(out)
    assert len(rows) == 65
    assert sum(int(r['count']) for r in rows) == 2 ** 64
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 65
    assert printed[32].split() == ['32', str(1832624140942590534)]


def test_analyze_linear_check(capsys):
    assert main(['analyze', '--mode', 'linear-check', '--layers', '8']) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith('deviation: ')
    assert float(line.split()[-1]) < 1e-8


def test_quantization(capsys):
    def plateaus(b):
        assert main(['quantization', '--batch_size', str(b)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == 'requested_tau,effective_tau,batch_size'
        table = [tuple(float(v) for v in l.split(',')) for l in lines[1:]]
        assert len(table) == 100
        return table

    assert len({e for _, e, _ in plateaus(8)}) == 9
    assert len({e for _, e, _ in plateaus(1)}) == 2
    assert max(abs(e - t) for t, e, _ in plateaus(2048)) <= 1 / 4096
    assert main(['quantization', '--batch_size', '0']) == 2
    assert 'batch_size' in capsys.readouterr().err
    out = test.file_path('q.csv')
    assert main(['quantization', '--batch_size', '8', '--floor',
                 '--out', out]) == 0
    assert len(read_csv(out)) == 100


def test_bench_report(capsys):
    out = test.file_path('bench.json')
    assert main(['bench', '--width', '16', '--depth', '2', '--batch', '8',
                 '--repeats', '1', '--out', out]) == 0
    with open(out) as fp:
        report = json.load(fp)
    assert report['block_flop_ratio'] == 0.5
    assert json.loads(capsys.readouterr().out) == report

from dataclasses import replace

import pytest

from cosub.tests import TestSetup
from cosub import config as cfg_module
from cosub.config import (
    ConfigError, DataSpec, ExperimentConfig, load_config, parse_config,
    to_text)
from cosub.dataio import SyntheticKind
from cosub.nn.blocks import ModelKind
from cosub.nn.losses import LossKind
from cosub.nn.optim import Schedule
from cosub.nn.sdepth import SDImpl, SDMode
from cosub.train.strategies import StrategyKind

test = TestSetup(__name__, ensure_empty=True)
log = test.log

TOY = '''
# toy cosub run
model.width = 32
model.depth = 4
strategy.kind = cosub
cosub.lam = 0.5   # weight of the label loss
sd.tau = 0.3
sd.mode = progressive
optim.batch_size = 64
optim.base_lr = 0.001
optim.schedule = constant
data.n_train = 640
data.n_test = 128
data.kind = spirals
epochs = 3
'''


def test_docs():
    import doctest
    r = doctest.testmod(cfg_module)
    assert r.attempted > 0
    assert r.failed == 0


def test_defaults():
    c = parse_config('')
    assert c == ExperimentConfig()
    assert c.data == DataSpec()
    assert c.strategy.kind == StrategyKind.cosub
    assert c.data.noise == 2.2
    assert (c.data.n_train, c.data.n_test, c.data.classes) == \
        (10000, 2000, 10)


def test_parse_sections_and_types():
    c = parse_config(TOY)
    assert (c.model.width, c.model.depth) == (32, 4)
    assert c.model.kind == ModelKind.residual_mlp
    assert c.strategy.cosub.lam == 0.5
    assert c.strategy.cosub.loss_kind == LossKind.bce_soft
    assert c.sd.tau == 0.3
    assert c.sd.mode == SDMode.progressive
    assert c.sd.impl == SDImpl.efficient
    assert c.optim.batch_size == 64
    assert c.optim.schedule == Schedule.constant
    assert c.data.kind == SyntheticKind.spirals
    assert c.epochs == 3


def test_round_trip_through_text():
    c = parse_config(TOY, ['strategy.shared_pattern=yes',
                           'strategy.ema_momentum=0.99'])
    assert c.strategy.shared_pattern is True
    text = to_text(c)
    assert text.splitlines() == sorted(text.splitlines())
    assert 'optim.layer_decay = none\n' in text
    assert parse_config(text) == c
    assert to_text(parse_config(text)) == text


def test_overrides_apply_after_file():
    path = test.file_path('toy.cfg')
    with open(path, 'w') as fp:
        fp.write(TOY)
    c = load_config(path, ['seed=7', 'cosub.lam = 1.0', 'sd.tau=0'])
    assert c.seed == 7
    assert c.strategy.cosub.lam == 1.0
    assert c.sd.tau == 0.0
    with pytest.raises(ConfigError) as e:
        load_config(test.file_path('missing.cfg'))
    assert e.value.field is None


def _field_of(text, overrides=()):
    with pytest.raises(ConfigError) as e:
        parse_config(text, overrides)
    assert isinstance(e.value, ValueError)
    return e.value.field


def test_errors_name_the_field():
    assert _field_of('strategy.kind = bogus') == 'strategy.kind'
    assert _field_of('', ['model.widht=3']) == 'model.widht'
    assert _field_of('epochs = many') == 'epochs'
    assert _field_of('strategy.shared_pattern = maybe') == \
        'strategy.shared_pattern'
    assert _field_of('cosub.lam = 1.5') == 'cosub.lam'
    assert _field_of('sd.tau = 1.0') == 'sd.tau'
    assert _field_of('strategy.kind = kd') == 'strategy.teacher_checkpoint'
    assert _field_of('strategy.ema_momentum = 2') == 'strategy.ema_momentum'
    assert _field_of('model.num_classes = 3') == 'model.num_classes'
    assert _field_of('model.input_dim = 3') == 'model.input_dim'
    assert _field_of('model.depth = 0') == 'model.depth'
    assert _field_of('data.augment = blur') == 'data.augment'
    assert _field_of('optim.batch_size = 20000') == 'optim.batch_size'
    assert _field_of('optim.layer_decay = 1.5') == 'optim'
    assert _field_of('dtype = float16') == 'dtype'
    assert _field_of('eval_every = 0') == 'eval_every'
    assert _field_of('model.kind = tiny-vit\nmodel.patch_size = 5') == \
        'model.patch_size'
    assert _field_of('just words') is None
    assert _field_of('', ['no-equals']) is None


def test_idx_data_skips_synthetic_checks():
    c = parse_config('data.train_images = a\ndata.train_labels = b\n'
                     'data.test_images = c\ndata.test_labels = d\n'
                     'data.classes = 1')
    assert c.data.uses_idx
    assert not parse_config('').data.uses_idx


def test_seed_replicas_share_a_key():
    c = parse_config(TOY)
    r = c.for_seed(3)
    assert (r.seed, r.model.seed) == (3, 3)
    assert r.key() == c.key()
    assert replace(c, out_dir='elsewhere').key() == c.key()
    assert parse_config(TOY, ['sd.tau=0.2']).key() != c.key()
    assert len(c.key()) == 12


def test_shipped_configs_parse():
    import glob
    import os
    import cosub
    root = os.path.join(os.path.dirname(cosub.__file__), '..', 'configs')
    paths = sorted(glob.glob(os.path.join(root, '*.cfg')))
    assert paths
    for path in paths:
        c = load_config(path)
        assert c.out_dir.startswith('runs/'), path
    lams = [load_config(os.path.join(root, f'lam_sweep_{s}.cfg'))
            for s in ('1_0', '0_5', '0_1')]
    assert [c.strategy.cosub.lam for c in lams] == [1.0, 0.5, 0.1]
    assert len({c.key() for c in lams}) == 3

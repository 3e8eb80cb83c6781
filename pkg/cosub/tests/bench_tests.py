import pytest

from cosub.tests import TestSetup
from cosub.bench import run_bench

test = TestSetup(__name__)
log = test.log


def test_block_flops_halve_at_half_drop_rate():
    report = run_bench(width=16, depth=3, batch=8, tau=0.5, repeats=1,
                       input_dim=5, num_classes=3)
    naive, eff = report['naive'], report['efficient']
    assert report['tau_eff'] == 0.5
    assert report['block_flop_ratio'] == 0.5
    assert eff['block_flops'] * 2 == naive['block_flops']
    assert naive['block_rows'] == 3 * 8
    assert eff['block_rows'] == 3 * 4
    assert naive['total_flops'] - naive['block_flops'] == \
        eff['total_flops'] - eff['block_flops']
    assert naive['seconds'] > 0 and report['time_ratio'] > 0
    assert {'machine', 'numpy', 'width', 'depth', 'batch', 'repeats'} <= \
        set(report)


def test_no_drops_same_flops():
    report = run_bench(width=8, depth=2, batch=4, tau=0.0, repeats=1)
    assert report['block_flop_ratio'] == 1.0
    assert report['naive']['block_rows'] == report['efficient']['block_rows']


def test_bad_sizes_rejected():
    with pytest.raises(ValueError):
        run_bench(width=8, depth=0, batch=4)

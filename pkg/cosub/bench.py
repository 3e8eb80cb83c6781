"""
Naive versus efficient stochastic depth: wall-clock and matmul FLOPs
of one forward and backward pass of a residual MLP.

Both implementations run the same drop pattern. ``block_flops``
counts only work inside residual branches, so at ``tau = 0.5`` the
efficient kernel reports exactly half of the naive count.
"""
import platform
import statistics
import time
from typing import Any, Dict, List

import numpy as np

from cosub.nn.autograd import Tape, backward, counting
from cosub.nn.blocks import build_residual_mlp, forward
from cosub.nn.losses import LabelKind, label_loss
from cosub.nn.sdepth import SDConfig, SDImpl, effective_rate, sample_pattern

import logging
log = logging.getLogger(__name__)


def _pass(model, x, labels, pattern, impl: SDImpl) -> None:
    for t in model.tensors():
        t.grad = None
    with Tape() as tape:
        loss = label_loss(forward(model, x, pattern, impl), labels,
                          LabelKind.ce)
    backward(tape, loss)


def run_bench(width: int = 256, depth: int = 12, batch: int = 128,
              tau: float = 0.5, repeats: int = 5, input_dim: int = 64,
              num_classes: int = 10, seed: int = 0) -> Dict[str, Any]:
    if min(width, depth, batch, repeats) < 1:
        raise ValueError('width, depth, batch and repeats must be >= 1')
    rng = np.random.default_rng(seed)
    model = build_residual_mlp(width, depth, num_classes, input_dim,
                               seed=seed)
    x = rng.standard_normal((batch, input_dim)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=batch)
    pattern = sample_pattern(batch, depth, SDConfig(tau=tau), rng)
    report: Dict[str, Any] = dict(
        width=width, depth=depth, batch=batch, tau=tau, repeats=repeats,
        tau_eff=effective_rate(batch, tau),
        machine=f'{platform.machine()} {platform.processor()}'.strip(),
        numpy=np.__version__)
    for impl in SDImpl:
        with counting() as counter:
            _pass(model, x, labels, pattern, impl)
        _pass(model, x, labels, pattern, impl)
        times: List[float] = []
        for _ in range(repeats):
            started = time.perf_counter()
            _pass(model, x, labels, pattern, impl)
            times.append(time.perf_counter() - started)
        report[impl.value] = dict(
            seconds=statistics.median(times),
            block_flops=counter.flops['block'],
            total_flops=sum(counter.flops.values()),
            block_rows=sum(counter.block_rows))
        log.debug('%s: %s', impl.value, report[impl.value])
    naive, eff = report['naive'], report['efficient']
    report['block_flop_ratio'] = eff['block_flops'] / naive['block_flops']
    report['time_ratio'] = eff['seconds'] / naive['seconds']
    return report

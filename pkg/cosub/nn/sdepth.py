"""
Stochastic depth: drop-pattern sampling, the naive masking oracle and
the efficient permute-select kernel.

The efficient kernel keeps a fixed number of rows per layer::

    B_keep = round(B * (1 - tau))

(rounding half up), so the drop rate actually realized is
``tau_eff = 1 - B_keep / B``. Kept residuals are scaled by
``1 / (1 - tau_eff)`` at training time; inference applies every
block unscaled.

>>> effective_rate(8, 0.25)
0.25
>>> keep_count(2048, 0.3)
1434
>>> [effective_rate(1, t) for t in (0.0, 0.5, 0.51)]
[0.0, 0.0, 1.0]

Permutations come from ``numpy.random.Generator.permutation`` (a
Fisher-Yates shuffle driven by the caller's seeded PCG64 stream), so
patterns are reproducible across platforms for a given seed.
"""
import enum
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from cosub.nn.autograd import (
    Tensor, active_counter, counter_section, index_add, mul, take_rows)

import logging
log = logging.getLogger(__name__)

Block = Callable[[Tensor], Tensor]


class SDMode(enum.Enum):
    uniform = 'uniform'
    progressive = 'progressive'


class SDImpl(enum.Enum):
    naive = 'naive'
    efficient = 'efficient'


@dataclass(frozen=True)
class SDConfig:
    tau: float = 0.0
    mode: SDMode = SDMode.uniform
    impl: SDImpl = SDImpl.efficient

    def check(self) -> 'SDConfig':
        if not 0 <= self.tau < 1:
            raise ValueError(f'drop rate must be in [0, 1): {self.tau}')
        return self

    def layer_rates(self, num_layers: int) -> List[float]:
        if self.mode == SDMode.progressive:
            return [self.tau * (l + 1) / num_layers
                    for l in range(num_layers)]
        return [self.tau] * num_layers


def keep_count(batch_size: int, tau: float) -> int:
    """Rows kept per layer, ``round(B * (1 - tau))`` half up."""
    return max(0, int(math.floor(batch_size * (1 - tau) + 0.5)))


def effective_rate(batch_size: int, tau: float) -> float:
    if batch_size < 1:
        raise ValueError(f'batch size must be positive: {batch_size}')
    return 1 - keep_count(batch_size, tau) / batch_size


def residual_scale(tau_eff: float) -> float:
    return 1.0 if tau_eff >= 1 else 1.0 / (1.0 - tau_eff)


class DropPattern:
    """
    Identity of a submodel per sample: for every layer ``l`` the batch
    rows ``kept[l]`` for which block ``l`` is applied, and the scale
    those rows use.
    """
    def __init__(self, batch_size: int, kept: Sequence[np.ndarray],
                 rates: Sequence[float], scales: Sequence[float]) -> None:
        if not (len(kept) == len(rates) == len(scales)):
            raise AssertionError('kept/rates/scales length mismatch')
        self.batch_size = batch_size
        self.kept = [np.asarray(k, dtype=np.int64) for k in kept]
        self.rates = list(rates)
        self.scales = list(scales)
        for k in self.kept:
            check_indices(k, batch_size)

    @property
    def num_layers(self) -> int:
        return len(self.kept)

    def mask(self, layer: int) -> np.ndarray:
        m = np.zeros(self.batch_size, dtype=bool)
        m[self.kept[layer]] = True
        return m

    def masks(self) -> np.ndarray:
        """(L, B) boolean gates."""
        return np.stack([self.mask(l) for l in range(self.num_layers)]) \
            if self.num_layers else np.zeros((0, self.batch_size), bool)

    def rows(self, rows: np.ndarray) -> 'DropPattern':
        """Pattern restricted to a subset of batch rows, renumbered."""
        rows = np.asarray(rows, dtype=np.int64)
        lookup = -np.ones(self.batch_size, dtype=np.int64)
        lookup[rows] = np.arange(len(rows))
        kept = []
        for k in self.kept:
            sel = lookup[k]
            kept.append(np.sort(sel[sel >= 0]))
        return DropPattern(len(rows), kept, self.rates, self.scales)

    @classmethod
    def from_masks(cls, masks: np.ndarray, scales: Sequence[float],
                   rates: Optional[Sequence[float]] = None
                   ) -> 'DropPattern':
        masks = np.asarray(masks, dtype=bool)
        num_layers, batch_size = masks.shape
        kept = [np.flatnonzero(m) for m in masks]
        if rates is None:
            rates = [1 - len(k) / batch_size for k in kept]
        return cls(batch_size, kept, rates, scales)

    @classmethod
    def all_kept(cls, batch_size: int, num_layers: int) -> 'DropPattern':
        return cls(batch_size,
                   [np.arange(batch_size)] * num_layers,
                   [0.0] * num_layers, [1.0] * num_layers)

    @classmethod
    def all_dropped(cls, batch_size: int,
                    num_layers: int) -> 'DropPattern':
        empty = np.zeros(0, dtype=np.int64)
        return cls(batch_size, [empty] * num_layers,
                   [1.0] * num_layers, [1.0] * num_layers)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, DropPattern)
                and self.batch_size == other.batch_size
                and self.scales == other.scales
                and len(self.kept) == len(other.kept)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.kept, other.kept)))

    def __repr__(self) -> str:
        counts = [len(k) for k in self.kept]
        return f'DropPattern(B={self.batch_size}, kept={counts})'


def check_indices(rows: np.ndarray, batch_size: int) -> None:
    if rows.ndim != 1:
        raise ValueError(f'kept indices must be 1-D, got {rows.shape}')
    if len(rows) == 0:
        return
    if rows.min() < 0 or rows.max() >= batch_size:
        raise ValueError(f'kept index out of range [0, {batch_size}): '
                         f'{rows.min()}..{rows.max()}')
    if len(np.unique(rows)) != len(rows):
        raise ValueError('kept indices contain duplicates')


def sample_pattern(batch_size: int, num_layers: int, config: SDConfig,
                   rng: np.random.Generator) -> DropPattern:
    """
    Each layer draws its own permutation of the batch and keeps the
    first ``B_keep`` rows. Progressive mode uses
    ``tau_l = tau * (l + 1) / L``.
    """
    if batch_size < 1:
        raise ValueError(f'batch size must be positive: {batch_size}')
    config.check()
    rates = config.layer_rates(num_layers)
    kept, scales = [], []
    for tau_l in rates:
        n_keep = keep_count(batch_size, tau_l)
        kept.append(rng.permutation(batch_size)[:n_keep])
        scales.append(residual_scale(effective_rate(batch_size, tau_l)))
    return DropPattern(batch_size, kept, rates, scales)


def sample_bernoulli_pattern(batch_size: int, num_layers: int, tau: float,
                             rng: np.random.Generator) -> DropPattern:
    """
    Per-sample Bernoulli(1 - tau) gates with the nominal
    ``1 / (1 - tau)`` scale: the original stochastic depth formulation.
    Only the naive implementation is meaningful for these patterns in
    expectation arguments; both implementations accept them.
    """
    masks = rng.random((num_layers, batch_size)) >= tau
    return DropPattern.from_masks(masks, [residual_scale(tau)] * num_layers,
                                  [tau] * num_layers)


def apply_naive(x: Tensor, block: Block, kept_mask: np.ndarray,
                scale: float) -> Tensor:
    """
    ``x + mask * scale * block(x)``: the block runs on every row and
    dropped rows are zeroed afterwards.
    """
    kept_mask = np.asarray(kept_mask, dtype=bool)
    if kept_mask.shape != (x.shape[0],):
        raise ValueError(f'mask shape {kept_mask.shape} does not match '
                         f'batch {x.shape[0]}')
    counter = active_counter()
    if counter is not None:
        counter.record_block(x.shape[0])
    with counter_section('block'):
        r = block(x)
    gate = (kept_mask * scale).astype(x.dtype)
    gate = gate.reshape((-1,) + (1,) * (x.ndim - 1))
    return x + mul(r, gate)


def apply_efficient(x: Tensor, block: Block, kept_indices: np.ndarray,
                    tau_effective: float) -> Tensor:
    """
    Gathers the kept rows, runs the block on that sub-batch only,
    scales by ``1 / (1 - tau_effective)`` and scatter-adds the result
    into a copy of ``x``.
    """
    return _select_apply(x, block, kept_indices, residual_scale(tau_effective))


def _select_apply(x: Tensor, block: Block, kept_indices: np.ndarray,
                  scale: float) -> Tensor:
    kept_indices = np.asarray(kept_indices, dtype=np.int64)
    check_indices(kept_indices, x.shape[0])
    counter = active_counter()
    if counter is not None:
        counter.record_block(len(kept_indices))
    if len(kept_indices) == 0:
        return x
    with counter_section('block'):
        r = block(take_rows(x, kept_indices))
    if scale != 1.0:
        r = mul(r, scale)
    return index_add(x, kept_indices, r)


def apply_layer(x: Tensor, block: Block, pattern: DropPattern, layer: int,
                impl: SDImpl) -> Tensor:
    scale = pattern.scales[layer]
    if impl == SDImpl.naive:
        return apply_naive(x, block, pattern.mask(layer), scale)
    return _select_apply(x, block, pattern.kept[layer], scale)


def quantization_table(batch_size: int, floor_dropped: bool = False,
                       step: float = 0.01
                       ) -> List[Tuple[float, float, int]]:
    """
    Staircase ``(requested_tau, effective_tau, B)`` over the requested
    grid ``0, 0.01, ..., 0.99``.

    ``floor_dropped`` switches to the alternative reading in which the
    number of DROPPED rows is ``floor(tau * B)``.

    >>> sorted({e for _, e, _ in quantization_table(8)})
    [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]
    """
    if batch_size < 1:
        raise ValueError(f'batch size must be positive: {batch_size}')
    steps = int(round(1 / step))
    rows = []
    for i in range(steps):
        tau = round(i * step, 10)
        if floor_dropped:
            eff = math.floor(tau * batch_size) / batch_size
        else:
            eff = effective_rate(batch_size, tau)
        rows.append((tau, eff, batch_size))
    return rows

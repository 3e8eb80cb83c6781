"""
Submodel population tools.

A submodel keeps a subset of the residual blocks of a trained model
and shares its weights. Kept blocks are applied unscaled unless a
scale is given.

>>> count_submodels(4, 2)
6
>>> sum(c for _, c in submodel_histogram(64)) == 2 ** 64
True
"""
import itertools
import math
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, \
    Union

import numpy as np

from cosub.dataio import Dataset
from cosub.nn.autograd import Tensor, mul
from cosub.nn.blocks import Model, ffn_block, linear_block
from cosub.nn.sdepth import apply_naive, residual_scale
from cosub.utils.fio import write_csv

import logging
log = logging.getLogger(__name__)

MAX_ENUM_LAYERS = 10


class SubmodelSpec(NamedTuple):
    kept_layers: Tuple[int, ...]
    num_layers: int

    @classmethod
    def of(cls, kept: Iterable[int], num_layers: int) -> 'SubmodelSpec':
        kept = tuple(int(l) for l in kept)
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ValueError(f'kept layers must be unique and ordered: '
                             f'{kept}')
        if kept and (kept[0] < 0 or kept[-1] >= num_layers):
            raise ValueError(f'kept layers out of range [0, {num_layers}): '
                             f'{kept}')
        return cls(kept, num_layers)

    @classmethod
    def full(cls, num_layers: int) -> 'SubmodelSpec':
        return cls(tuple(range(num_layers)), num_layers)

    @classmethod
    def from_mask(cls, mask: Sequence[bool]) -> 'SubmodelSpec':
        return cls(tuple(int(i) for i in np.flatnonzero(mask)), len(mask))

    def without(self, layers: Iterable[int]) -> 'SubmodelSpec':
        drop = set(layers)
        return SubmodelSpec(tuple(l for l in self.kept_layers
                                  if l not in drop), self.num_layers)

    def __len__(self) -> int:
        return len(self.kept_layers)


class SubmodelView:
    """Forward through the kept blocks of ``model``; weights are shared."""
    def __init__(self, model: Model, spec: SubmodelSpec,
                 scale: float = 1.0) -> None:
        if spec.num_layers != model.num_layers:
            raise ValueError(f'spec covers {spec.num_layers} layers, model '
                             f'has {model.num_layers}')
        self.model = model
        self.spec = spec
        self.scale = scale

    def __call__(self, batch: np.ndarray) -> Tensor:
        x = self.model.embed(batch)
        for l in self.spec.kept_layers:
            r = self.model.blocks[l](x)
            x = x + (r if self.scale == 1.0 else mul(r, self.scale))
        return self.model.readout(x)


def extract_submodel(model: Model, spec: SubmodelSpec,
                     scale: float = 1.0) -> SubmodelView:
    return SubmodelView(model, spec, scale)


def accuracy(view: SubmodelView, dataset: Dataset,
             batch_size: int = 500) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = view(dataset.samples[start:start + batch_size])
        correct += int((logits.data.argmax(axis=-1) ==
                        dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


class Bucket(NamedTuple):
    layers_kept: int
    mean_top1: float
    count: int


def population_curve(model: Model, tau: float, num_draws: int,
                     eval_set: Dataset, rng: np.random.Generator,
                     scaled: bool = False) -> List[Bucket]:
    """
    Submodels drawn with Bernoulli(1 - tau) gates per layer, evaluated
    and bucketed by layer count. Empty buckets are omitted.
    """
    if num_draws < 1:
        raise ValueError(f'need at least one draw: {num_draws}')
    if not 0 <= tau < 1:
        raise ValueError(f'drop rate must be in [0, 1): {tau}')
    scale = residual_scale(tau) if scaled else 1.0
    by_count: dict = {}
    for _ in range(num_draws):
        spec = SubmodelSpec.from_mask(rng.random(model.num_layers) >= tau)
        acc = accuracy(extract_submodel(model, spec, scale), eval_set)
        by_count.setdefault(len(spec), []).append(acc)
    return [Bucket(k, float(np.mean(v)), len(v))
            for k, v in sorted(by_count.items())]


def population_mean_accuracy(curve: Sequence[Bucket]) -> float:
    n = sum(b.count for b in curve)
    return sum(b.mean_top1 * b.count for b in curve) / n


def ablate_single_block(model: Model, eval_set: Dataset,
                        mode: str = 'pair') -> List[float]:
    """
    Accuracy with one block removed, per block. ``pair`` removes a
    transformer block (attention and FFN residuals together);
    ``residual`` removes a single residual branch.
    """
    full = SubmodelSpec.full(model.num_layers)
    if mode == 'pair':
        if model.num_layers % 2:
            raise ValueError(f'paired ablation needs an even number of '
                             f'residual blocks, model has '
                             f'{model.num_layers}')
        groups = [(2 * i, 2 * i + 1) for i in range(model.num_layers // 2)]
    elif mode == 'residual':
        groups = [(l,) for l in range(model.num_layers)]
    else:
        raise ValueError(f'unknown ablation mode {mode!r}')
    out = []
    for group in groups:
        out.append(accuracy(extract_submodel(model, full.without(group)),
                            eval_set))
        log.debug('without %s: %.4f', group, out[-1])
    return out


def count_submodels(num_layers: int, k: int) -> int:
    """Exact ``C(L, k)``: submodels keeping ``k`` of ``L`` blocks."""
    if num_layers < 0 or not 0 <= k <= num_layers:
        raise ValueError(f'need 0 <= k <= L, got L={num_layers} k={k}')
    return math.comb(num_layers, k)


def submodel_histogram(num_layers: int) -> List[Tuple[int, int]]:
    return [(k, count_submodels(num_layers, k))
            for k in range(num_layers + 1)]


def _random_blocks(num_layers: int, width: int, rng: np.random.Generator,
                  nonlinear: bool) -> list:
    if not nonlinear:
        return [linear_block(l, width, rng, std=0.3) for l in
                range(num_layers)]
    blocks = []
    for l in range(num_layers):
        b = ffn_block(l, width, 2 * width, rng, dtype=np.float64)
        for t in b.params.values():
            t.data = 0.5 * rng.standard_normal(t.shape)
        blocks.append(b)
    return blocks


def linear_average_check(num_layers: int, width: int, tau: float, seed: int,
                         rows: int = 8, nonlinear: bool = False) -> float:
    """
    Enumerates all ``2^L`` gate patterns of a stack of random blocks,
    weights each by its Bernoulli(1 - tau) probability and scales kept
    residuals by ``1 / (1 - tau)``. Returns the largest deviation of
    that expectation from the full unscaled stack over a batch of random inputs:
    zero up to rounding for linear blocks, not for nonlinear ones.
    """
    if num_layers > MAX_ENUM_LAYERS:
        raise ValueError(f'{num_layers} layers is too many to enumerate '
                         f'(max {MAX_ENUM_LAYERS})')
    if not 0 <= tau < 1:
        raise ValueError(f'drop rate must be in [0, 1): {tau}')
    rng = np.random.default_rng(seed)
    blocks = _random_blocks(num_layers, width, rng, nonlinear)
    x0 = Tensor(rng.standard_normal((rows, 1, width)))
    full = x0
    for b in blocks:
        full = full + b(full)
    scale = residual_scale(tau)
    keep_all = np.ones(rows, dtype=bool)
    drop_all = np.zeros(rows, dtype=bool)
    expected = np.zeros_like(x0.data)
    for gates in itertools.product((False, True), repeat=num_layers):
        prob = 1.0
        for g in gates:
            prob *= (1 - tau) if g else tau
        if prob == 0:
            continue
        x = x0
        for g, b in zip(gates, blocks):
            x = apply_naive(x, b, keep_all if g else drop_all, scale)
        expected += prob * x.data
    return float(np.abs(expected - full.data).max())


# --- plot data

def write_population_csv(path: Union[str, Path],
                         curve: Sequence[Bucket]) -> Path:
    return write_csv(path, ['layers_kept', 'mean_top1', 'count'],
                     [tuple(b) for b in curve])


def write_ablation_csv(path: Union[str, Path], accs: Sequence[float],
                       full_top1: Optional[float] = None) -> Path:
    return write_csv(path, ['block', 'top1', 'full_top1'],
                     [(i, a, full_top1) for i, a in enumerate(accs)])


def write_count_csv(path: Union[str, Path], num_layers: int) -> Path:
    return write_csv(path, ['k', 'count'], submodel_histogram(num_layers))

"""
AdamW with decoupled weight decay and the learning-rate rules used for
cosub training.

Learning rates scale with the square root of the batch size::

    train_lr    = 1e-3 * sqrt(BS / 2048)
    finetune_lr = 1e-4 * sqrt(BS / 2048) * C_LD      (C_LD = 2 with LayerDecay)

>>> train_lr(2048), train_lr(8192), train_lr(512)
(0.001, 0.002, 0.0005)
>>> round(finetune_lr(512, use_layer_decay=True), 12)
0.0001

LayerDecay multiplies the learning rate of block ``l`` (of ``L``) by
``LD ** (L - 1 - l)``: the last block and the head keep the full rate
and the rate decreases geometrically toward the stem, which shares the
multiplier of block 0.

>>> [round(f, 4) for f in layer_decay_factors(3, 0.5)]
[0.25, 0.5, 1.0, 1.0]
"""
import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cosub.nn.autograd import Tensor
from cosub.nn.blocks import Model

import logging
log = logging.getLogger(__name__)

REFERENCE_BATCH = 2048
C_LD = 2.0

_TAU = {
    # model: (1k train, 21k pre-train)
    'ViT-S': (0.05, 0.05),
    'ViT-M': (0.1, 0.05),
    'ViT-B': (0.2, 0.1),
    'ViT-L': (0.45, 0.3),
    'ViT-H': (0.6, 0.5),
}

_LAYER_DECAY = {'ViT-S': 0.7, 'ViT-M': 0.75, 'ViT-B': 0.75, 'ViT-L': 0.8,
                'ViT-H': 0.85}

NO_DECAY_NAMES = ('cls_token', 'pos_embed')


class NonFiniteError(ArithmeticError):
    def __init__(self, msg: str, param: Optional[str] = None,
                 index: Optional[int] = None) -> None:
        super().__init__(msg)
        self.param = param
        self.index = index


class Schedule(enum.Enum):
    constant = 'constant'
    cosine = 'cosine'


class PretrainRegime(enum.Enum):
    in1k = '1k-train'
    in21k = '21k-pretrain'


@dataclass(frozen=True)
class OptimConfig:
    """
    ``base_lr=None`` resolves to :func:`train_lr` (or :func:`finetune_lr`
    when ``finetune`` is set) for ``batch_size``.
    """
    base_lr: Optional[float] = None
    batch_size: int = 128
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer_decay: Optional[float] = None
    c_ld: float = C_LD
    schedule: Schedule = Schedule.cosine
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    finetune: bool = False

    def check(self) -> 'OptimConfig':
        if self.layer_decay is not None and not 0 < self.layer_decay <= 1:
            raise ValueError(f'layer decay must be in (0, 1]: '
                             f'{self.layer_decay}')
        if self.batch_size < 1:
            raise ValueError(f'batch size must be >= 1: {self.batch_size}')
        if self.warmup_epochs < 0:
            raise ValueError(f'warmup epochs must be >= 0: '
                             f'{self.warmup_epochs}')
        return self

    def peak_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        if self.finetune:
            return finetune_lr(self.batch_size,
                               self.layer_decay is not None, self.c_ld)
        return train_lr(self.batch_size)


def _check_batch(batch_size: int) -> None:
    if batch_size < 1:
        raise ValueError(f'batch size must be >= 1: {batch_size}')


def train_lr(batch_size: int) -> float:
    _check_batch(batch_size)
    return 1e-3 * math.sqrt(batch_size / REFERENCE_BATCH)


def finetune_lr(batch_size: int, use_layer_decay: bool,
                c_ld: float = C_LD) -> float:
    _check_batch(batch_size)
    return 1e-4 * math.sqrt(batch_size / REFERENCE_BATCH) * \
        (c_ld if use_layer_decay else 1.0)


def layer_decay_factors(num_layers: int,
                        layer_decay: Optional[float]) -> List[float]:
    """Multipliers for blocks ``0..L-1`` followed by the head."""
    if num_layers < 1:
        raise ValueError(f'need at least one block: {num_layers}')
    if layer_decay is None:
        return [1.0] * (num_layers + 1)
    if not 0 < layer_decay <= 1:
        raise ValueError(f'layer decay must be in (0, 1]: {layer_decay}')
    return [layer_decay ** (num_layers - 1 - l)
            for l in range(num_layers)] + [1.0]


def param_multipliers(model: Model,
                      layer_decay: Optional[float]) -> Dict[str, float]:
    """
    LayerDecay multiplier per parameter name. Decay is counted in depth
    units (a transformer block pairs attention and FFN residual blocks).
    """
    names = [name for name, _ in model.parameters()]
    if layer_decay is None or model.num_layers == 0:
        return {name: 1.0 for name in names}
    factors = layer_decay_factors(model.num_units, layer_decay)
    out = {}
    for name in names:
        section, _, rest = name.partition('.')
        if section == 'stem':
            out[name] = factors[0]
        elif section == 'blocks':
            out[name] = factors[model.unit_of(int(rest.split('.')[0]))]
        else:
            out[name] = factors[-1]
    return out


def applies_decay(name: str, t: Tensor) -> bool:
    return t.ndim > 1 and name.rsplit('.', 1)[-1] not in NO_DECAY_NAMES


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float,
          schedule: Schedule = Schedule.cosine, min_lr: float = 0.0) -> float:
    """
    Linear warmup to ``peak_lr`` over ``warmup_steps`` then cosine decay
    to ``min_lr`` at ``total_steps`` (or constant after warmup).

    >>> lr_at(0, 10, 2, 1.0), lr_at(1, 10, 2, 1.0), lr_at(2, 10, 2, 1.0)
    (0.5, 1.0, 1.0)
    """
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    if schedule == Schedule.constant:
        return peak_lr
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1 + math.cos(math.pi *
                                                             progress))


def tau_for_model(model_name: str,
                  regime: PretrainRegime = PretrainRegime.in1k,
                  more_regularization: bool = False) -> float:
    """
    Drop rate by model size; ``more_regularization`` adds 0.05 (long
    pre-training or large resolutions).

    >>> tau_for_model('ViT-B'), tau_for_model('ViT-H', PretrainRegime.in21k)
    (0.2, 0.5)
    """
    if model_name not in _TAU:
        raise ValueError(f'unknown model {model_name!r}, expected one of '
                         f'{sorted(_TAU)}')
    tau = _TAU[model_name][0 if regime == PretrainRegime.in1k else 1]
    return round(tau + 0.05, 10) if more_regularization else tau


def layer_decay_for_model(model_name: str) -> float:
    if model_name not in _LAYER_DECAY:
        raise ValueError(f'unknown model {model_name!r}, expected one of '
                         f'{sorted(_LAYER_DECAY)}')
    return _LAYER_DECAY[model_name]


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> 'AdamState':
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])

    def arrays(self) -> int:
        return len(self.m) + len(self.v)


def check_finite(names: Sequence[str], grads: Sequence[np.ndarray]) -> None:
    for name, g in zip(names, grads):
        bad = np.flatnonzero(~np.isfinite(g))
        if len(bad):
            i = int(bad[0])
            raise NonFiniteError(
                f'non-finite gradient for {name} at flat index {i} '
                f'({g.reshape(-1)[i]}), {len(bad)} bad values',
                param=name, index=i)


def step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
         state: AdamState, config: OptimConfig, lr: float,
         multipliers: Optional[Sequence[float]] = None,
         decay: Optional[Sequence[bool]] = None,
         names: Optional[Sequence[str]] = None) -> AdamState:
    """
    One AdamW update, in place on ``params[i].data``. Gradients are
    checked before anything is modified, so a rejected step leaves
    parameters and moments untouched.
    """
    n = len(params)
    if len(grads) != n or len(state.m) != n:
        raise AssertionError(f'{n} params, {len(grads)} grads, '
                             f'{len(state.m)} moment slots')
    if names is None:
        names = [p.name or f'param{i}' for i, p in enumerate(params)]
    check_finite(names, grads)
    multipliers = multipliers or [1.0] * n
    decay = decay if decay is not None else [True] * n
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1 - b1 ** t
    bias2 = 1 - b2 ** t
    for i, p in enumerate(params):
        if state.m[i].shape != p.shape:
            raise AssertionError(f'{names[i]}: state {state.m[i].shape} '
                                 f'!= param {p.shape}')
        g = np.asarray(grads[i], dtype=p.dtype)
        lr_p = lr * multipliers[i]
        if decay[i] and config.weight_decay:
            p.data = p.data * (1 - lr_p * config.weight_decay)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = (p.data - lr_p * m_hat / (np.sqrt(v_hat) + config.eps)
                  ).astype(p.dtype)
    return state


class AdamW:
    """Optimizer bound to named parameters; reads gradients off ``.grad``."""
    def __init__(self, named: Sequence[Tuple[str, Tensor]],
                 config: OptimConfig,
                 multipliers: Optional[Dict[str, float]] = None) -> None:
        self.config = config.check()
        self.names = [name for name, _ in named]
        self.params = [t for _, t in named]
        mult = multipliers or {}
        self.multipliers = [mult.get(name, 1.0) for name in self.names]
        self.decay = [applies_decay(name, t) for name, t in named]
        self.state = AdamState.zeros_like(self.params)

    @classmethod
    def for_model(cls, model: Model, config: OptimConfig) -> 'AdamW':
        return cls(model.parameters(), config,
                   param_multipliers(model, config.layer_decay))

    def grads(self) -> List[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad
                for p in self.params]

    def check_grads(self) -> None:
        check_finite(self.names, self.grads())

    def step(self, lr: float) -> None:
        step(self.params, self.grads(), self.state, self.config, lr,
             self.multipliers, self.decay, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

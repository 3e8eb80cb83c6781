"""
Training strategies as interchangeable per-batch step functions.

=============  =======  =========  ====================================
kind           weights  optimizer  targets of the non-label term
=============  =======  =========  ====================================
supervised     1x       1x         none
cosub          1x       1x         the other submodel of the same batch
kd             2x       1x         frozen teacher
mean-teacher   2x       1x         EMA of the student
cotrain        2x       2x         the other model
kd+cosub       2x       1x         other submodel and frozen teacher
=============  =======  =========  ====================================

Every step samples its drop patterns from ``state.rng``, computes a
:class:`~cosub.nn.losses.LossBundle` under one tape, and applies one
optimizer step per trained model. A duplicated batch is a single step
over ``2B`` rows.
"""
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from cosub.dataio import Batch, duplicate, originals
from cosub.nn.autograd import Tape, Tensor, add, backward, getitem, mul
from cosub.nn.blocks import Model, ModelKind, build_model, forward
from cosub.nn.checkpoint import load_checkpoint
from cosub.nn.losses import (
    CosubConfig, LossBundle, cosub_pair_loss, distill_loss, label_loss, mix,
    paired_label_loss, total_loss)
from cosub.nn.optim import AdamW, NonFiniteError, OptimConfig
from cosub.nn.sdepth import DropPattern, SDConfig, sample_pattern

import logging
log = logging.getLogger(__name__)

DEFAULT_EMA_MOMENTUM = 0.9999


class StrategyKind(enum.Enum):
    supervised = 'supervised'
    cosub = 'cosub'
    kd = 'kd'
    mean_teacher = 'mean-teacher'
    cotrain = 'cotrain'
    kd_cosub = 'kd+cosub'

    @property
    def uses_teacher(self) -> bool:
        return self in (StrategyKind.kd, StrategyKind.kd_cosub,
                        StrategyKind.mean_teacher)


@dataclass(frozen=True)
class StrategyConfig:
    """
    ``cosub.lam`` weights the label loss for every strategy.
    ``duplicate`` makes ``supervised`` train on the duplicated batch,
    ``shared_pattern`` gives both ``cotrain`` models the same drop
    pattern.
    """
    kind: StrategyKind = StrategyKind.cosub
    cosub: CosubConfig = field(default_factory=CosubConfig)
    ema_momentum: Optional[float] = None
    teacher_checkpoint: Optional[str] = None
    shared_pattern: bool = False
    duplicate: bool = False

    @property
    def momentum(self) -> float:
        return DEFAULT_EMA_MOMENTUM if self.ema_momentum is None \
            else self.ema_momentum

    def check(self, teacher_given: bool = False) -> 'StrategyConfig':
        self.cosub.check()
        if self.kind in (StrategyKind.kd, StrategyKind.kd_cosub) and \
                self.teacher_checkpoint is None and not teacher_given:
            raise ValueError(f'{self.kind.value} requires a teacher '
                             f'checkpoint')
        if not 0 <= self.momentum <= 1:
            raise ValueError(f'EMA momentum must be in [0, 1]: '
                             f'{self.momentum}')
        return self


class Storage(NamedTuple):
    weights: int
    optimizers: int
    floats: int


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    rng: np.random.Generator
    teacher: Optional[Model] = None
    peer: Optional[Model] = None
    peer_optimizer: Optional[AdamW] = None
    epoch: int = 0
    steps: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    warned: bool = False

    def models(self) -> List[Tuple[str, Model]]:
        named = [('model', self.model)]
        if self.teacher is not None:
            named.append(('teacher', self.teacher))
        if self.peer is not None:
            named.append(('peer', self.peer))
        return named

    def optimizers(self) -> List[AdamW]:
        opts = [self.optimizer]
        if self.peer_optimizer is not None:
            opts.append(self.peer_optimizer)
        return opts

    def storage(self) -> Storage:
        """
        Parameter sets and optimizer states held. Sets never share
        tensors; ``floats`` counts parameters plus Adam moments.
        """
        seen: Dict[int, str] = {}
        floats = 0
        for role, model in self.models():
            for name, t in model.parameters():
                if id(t) in seen:
                    raise AssertionError(f'{role}.{name} shares storage '
                                         f'with {seen[id(t)]}')
                seen[id(t)] = f'{role}.{name}'
                floats += t.size
        for opt in self.optimizers():
            floats += sum(m.size + v.size
                          for m, v in zip(opt.state.m, opt.state.v))
        return Storage(len(self.models()), len(self.optimizers()), floats)


def check_teacher(student: Model, teacher: Model) -> None:
    if teacher.num_classes != student.num_classes:
        raise ValueError(f'teacher predicts {teacher.num_classes} classes, '
                         f'student {student.num_classes}')
    if _input_signature(teacher) != _input_signature(student):
        raise ValueError(f'teacher input {_input_signature(teacher)} does '
                         f'not match student {_input_signature(student)}')


def _input_signature(model: Model) -> Tuple[Any, ...]:
    spec = model.spec
    if spec.kind == ModelKind.tiny_vit:
        return spec.kind.value, spec.channels, spec.image_size
    return spec.kind.value, spec.input_dim


def init_state(model: Model, strategy: StrategyConfig, optim: OptimConfig,
               seed: int, teacher: Optional[Model] = None,
               peer: Optional[Model] = None) -> TrainState:
    """
    ``teacher`` overrides ``strategy.teacher_checkpoint``; ``peer``
    overrides the second cotrain model, which is otherwise built from
    the student's spec with the next seed.
    """
    strategy.check(teacher_given=teacher is not None)
    state = TrainState(model, AdamW.for_model(model, optim),
                       np.random.default_rng(seed))
    kind = strategy.kind
    if kind in (StrategyKind.kd, StrategyKind.kd_cosub):
        if teacher is None:
            teacher = load_checkpoint(str(strategy.teacher_checkpoint))
        check_teacher(model, teacher)
        state.teacher = teacher.copy(requires_grad=False)
    elif kind == StrategyKind.mean_teacher:
        state.teacher = model.copy(requires_grad=False)
    elif kind == StrategyKind.cotrain:
        if peer is None:
            peer = build_model(replace(model.spec, seed=model.spec.seed + 1),
                               dtype=model.dtype)
        state.peer = peer
        state.peer_optimizer = AdamW.for_model(peer, optim)
    log.debug('%s state: %s', kind.value, state.storage())
    return state


def ema_update(teacher: Model, student: Model, momentum: float) -> None:
    """``teacher <- m * teacher + (1 - m) * student``, in place."""
    for (tn, t), (sn, s) in zip(teacher.parameters(), student.parameters()):
        if tn != sn or t.shape != s.shape:
            raise AssertionError(f'EMA pairs {tn} {t.shape} with '
                                 f'{sn} {s.shape}')
        t.data = (momentum * t.data + (1 - momentum) * s.data
                  ).astype(t.dtype)


def _sample(state: TrainState, batch_size: int,
            sd: SDConfig) -> DropPattern:
    return sample_pattern(batch_size, state.model.num_layers, sd, state.rng)


def _split_pair(logits: Tensor) -> Tuple[Tensor, Tensor]:
    return getitem(logits, slice(0, None, 2)), getitem(logits, slice(1, None, 2))


def _warn_identical(state: TrainState, pattern: DropPattern) -> None:
    if state.warned:
        return
    if all(len(k) == pattern.batch_size for k in pattern.kept):
        log.warning('drop patterns keep every row (tau_eff = 0): both '
                    'submodels are the full model and the cosub gradient '
                    'is zero')
        state.warned = True


def _label(logits: Tensor, labels: np.ndarray, config: CosubConfig) -> Tensor:
    return label_loss(logits, labels, config.label_loss_kind,
                      config.label_smoothing)


def _update(tape: Tape, loss: Tensor, optimizers: List[AdamW],
            lr: float) -> None:
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f'non-finite loss {value}')
    for opt in optimizers:
        opt.zero_grad()
    backward(tape, loss)
    for opt in optimizers:
        opt.check_grads()
    for opt in optimizers:
        opt.step(lr)


def step_supervised(state: TrainState, batch: Batch, sd: SDConfig,
                    config: StrategyConfig, lr: float) -> LossBundle:
    """
    Label loss only. On a duplicated batch (or with
    ``config.duplicate``) the loss is the mean over both copies and the
    agreement of the two submodels is reported, not trained.
    """
    cfg = config.cosub
    if config.duplicate or batch.duplicated:
        rows = duplicate(batch)
        pattern = _sample(state, len(rows), sd)
        with Tape() as tape:
            y1, y2 = _split_pair(forward(state.model, rows.x, pattern,
                                         sd.impl))
            label = paired_label_loss(y1, y2, rows.y[0::2], cfg)
            bundle = LossBundle(label, label,
                                cosub_pair_loss(y1, y2, cfg.loss_kind))
    else:
        pattern = _sample(state, len(batch), sd)
        with Tape() as tape:
            label = _label(forward(state.model, batch.x, pattern, sd.impl),
                           batch.y, cfg)
            bundle = LossBundle(label, label, Tensor(np.zeros((), label.dtype)))
    _update(tape, bundle.total, [state.optimizer], lr)
    return bundle


def step_cosub(state: TrainState, batch: Batch, sd: SDConfig,
               config: StrategyConfig, lr: float) -> LossBundle:
    rows = duplicate(batch)
    pattern = _sample(state, len(rows), sd)
    _warn_identical(state, pattern)
    with Tape() as tape:
        y1, y2 = _split_pair(forward(state.model, rows.x, pattern, sd.impl))
        bundle = total_loss(y1, y2, rows.y[0::2], config.cosub)
    _update(tape, bundle.total, [state.optimizer], lr)
    return bundle


def _teacher(state: TrainState) -> Model:
    if state.teacher is None:
        raise AssertionError('strategy needs a teacher but the state has '
                             'none')
    return state.teacher


def step_kd(state: TrainState, batch: Batch, sd: SDConfig,
            config: StrategyConfig, lr: float) -> LossBundle:
    """Student with stochastic depth against the full frozen teacher."""
    cfg = config.cosub
    batch = originals(batch)
    y_teacher = forward(_teacher(state), batch.x)
    pattern = _sample(state, len(batch), sd)
    with Tape() as tape:
        y = forward(state.model, batch.x, pattern, sd.impl)
        bundle = mix(_label(y, batch.y, cfg),
                     distill_loss(y, y_teacher, cfg.loss_kind), cfg.lam)
    _update(tape, bundle.total, [state.optimizer], lr)
    return bundle


def step_mean_teacher(state: TrainState, batch: Batch, sd: SDConfig,
                      config: StrategyConfig, lr: float) -> LossBundle:
    bundle = step_kd(state, batch, sd, config, lr)
    ema_update(_teacher(state), state.model, config.momentum)
    return bundle


def step_cotrain(state: TrainState, batch: Batch, sd: SDConfig,
                 config: StrategyConfig, lr: float) -> LossBundle:
    """
    Both models learn from the labels and from each other's
    stop-gradient output. The returned bundle averages the two.
    """
    if state.peer is None or state.peer_optimizer is None:
        raise AssertionError('cotrain needs a peer model and optimizer')
    cfg = config.cosub
    batch = originals(batch)
    pattern_a = _sample(state, len(batch), sd)
    pattern_b = pattern_a if config.shared_pattern \
        else _sample(state, len(batch), sd)
    with Tape() as tape:
        ya = forward(state.model, batch.x, pattern_a, sd.impl)
        yb = forward(state.peer, batch.x, pattern_b, sd.impl)
        a = mix(_label(ya, batch.y, cfg),
                distill_loss(ya, yb, cfg.loss_kind), cfg.lam)
        b = mix(_label(yb, batch.y, cfg),
                distill_loss(yb, ya, cfg.loss_kind), cfg.lam)
        both = add(a.total, b.total)
    _update(tape, both, [state.optimizer, state.peer_optimizer], lr)
    return LossBundle(mul(both, 0.5),
                      mul(add(a.label_part, b.label_part), 0.5),
                      mul(add(a.cosub_part, b.cosub_part), 0.5))


def step_kd_cosub(state: TrainState, batch: Batch, sd: SDConfig,
                  config: StrategyConfig, lr: float) -> LossBundle:
    """
    ``lam * label + (1 - lam) / 2 * (cosub term + teacher term)``, the
    teacher term being the mean distillation loss of both submodels.
    """
    cfg = config.cosub
    rows = duplicate(batch)
    y_teacher = forward(_teacher(state), rows.x[0::2])
    pattern = _sample(state, len(rows), sd)
    _warn_identical(state, pattern)
    with Tape() as tape:
        y1, y2 = _split_pair(forward(state.model, rows.x, pattern, sd.impl))
        label = paired_label_loss(y1, y2, rows.y[0::2], cfg)
        from_teacher = mul(add(distill_loss(y1, y_teacher, cfg.loss_kind),
                               distill_loss(y2, y_teacher, cfg.loss_kind)),
                           0.5)
        other = mul(add(cosub_pair_loss(y1, y2, cfg.loss_kind),
                        from_teacher), 0.5)
        bundle = mix(label, other, cfg.lam)
    _update(tape, bundle.total, [state.optimizer], lr)
    return bundle


StepFn = Callable[[TrainState, Batch, SDConfig, StrategyConfig, float],
                  LossBundle]

STEPS: Dict[StrategyKind, StepFn] = {
    StrategyKind.supervised: step_supervised,
    StrategyKind.cosub: step_cosub,
    StrategyKind.kd: step_kd,
    StrategyKind.mean_teacher: step_mean_teacher,
    StrategyKind.cotrain: step_cotrain,
    StrategyKind.kd_cosub: step_kd_cosub,
}


def run_step(state: TrainState, batch: Batch, sd: SDConfig,
             config: StrategyConfig, lr: float) -> LossBundle:
    bundle = STEPS[config.kind](state, batch, sd, config, lr)
    state.steps += 1
    return bundle

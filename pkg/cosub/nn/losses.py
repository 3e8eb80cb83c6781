"""
Classification losses and the cosub objective.

All losses are means: over the batch, and for binary cross-entropy also
over classes, so that ``lam`` mixes terms of comparable scale::

    total = lam * (L(y1, y) + L(y2, y)) / 2
          + (1 - lam) * (L(y1, sg(y2)) + L(y2, sg(y1))) / 2

"Hard" targets are the one-hot argmax of the teacher branch.

>>> z = Tensor(np.zeros((4, 3)))
>>> round(label_loss(z, np.array([0, 1, 2, 0]), LabelKind.ce).item(), 6)
1.098612
>>> round(label_loss(z, np.array([0, 1, 2, 0]), LabelKind.bce).item(), 6)
0.693147
"""
import enum
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np

from cosub.nn.autograd import (
    ShapeError, Tensor, add, log_softmax, mean, mul, sigmoid, softplus,
    stop_gradient, sub, sum_)


class LossKind(enum.Enum):
    bce_soft = 'bce-soft'
    bce_hard = 'bce-hard'
    ce_hard = 'ce-hard'


class LabelKind(enum.Enum):
    bce = 'bce'
    ce = 'ce'


@dataclass(frozen=True)
class CosubConfig:
    lam: float = 0.5
    loss_kind: LossKind = LossKind.bce_soft
    label_smoothing: float = 0.0
    label_kind: Optional[LabelKind] = None

    def check(self) -> 'CosubConfig':
        if not 0 <= self.lam <= 1:
            raise ValueError(f'lambda must be in [0, 1]: {self.lam}')
        if self.label_smoothing < 0:
            raise ValueError(f'label smoothing must be >= 0: '
                             f'{self.label_smoothing}')
        return self

    @property
    def label_loss_kind(self) -> LabelKind:
        if self.label_kind is not None:
            return self.label_kind
        return LabelKind.ce if self.loss_kind == LossKind.ce_hard \
            else LabelKind.bce


class LossBundle(NamedTuple):
    total: Tensor
    label_part: Tensor
    cosub_part: Tensor

    def values(self) -> Dict[str, float]:
        return {'loss': self.total.item(),
                'label_loss': self.label_part.item(),
                'cosub_loss': self.cosub_part.item()}


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32,
            smoothing: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f'labels must be in [0, {num_classes}), got '
                         f'{labels.min()}..{labels.max()}')
    t = np.zeros((len(labels), num_classes), dtype=dtype)
    t[np.arange(len(labels)), labels] = 1
    if smoothing:
        t = t * (1 - smoothing) + smoothing / num_classes
    return t.astype(dtype)


def bce_with_targets(logits: Tensor, targets: np.ndarray) -> Tensor:
    """mean(softplus(z) - z * t): sigmoid binary cross-entropy."""
    return mean(sub(softplus(logits), mul(logits, targets)))


def ce_with_targets(logits: Tensor, targets: np.ndarray) -> Tensor:
    return mul(mean(sum_(mul(log_softmax(logits), targets), axis=-1)), -1.0)


def label_loss(logits: Tensor, labels: np.ndarray, kind: LabelKind,
               smoothing: float = 0.0) -> Tensor:
    t = one_hot(labels, logits.shape[-1], logits.dtype, smoothing)
    if kind == LabelKind.bce:
        return bce_with_targets(logits, t)
    return ce_with_targets(logits, t)


def _hard_targets(teacher: np.ndarray) -> np.ndarray:
    return one_hot(teacher.argmax(axis=-1), teacher.shape[-1],
                   teacher.dtype)


def distill_loss(student: Tensor, teacher: Tensor, kind: LossKind) -> Tensor:
    """``L(student, sg(teacher))``; no gradient reaches ``teacher``."""
    if student.shape != teacher.shape:
        raise ShapeError(f'student {student.shape} and teacher '
                         f'{teacher.shape} logits differ in shape')
    frozen = stop_gradient(teacher)
    if kind == LossKind.bce_soft:
        return bce_with_targets(student, sigmoid(frozen).data)
    if kind == LossKind.bce_hard:
        return bce_with_targets(student, _hard_targets(frozen.data))
    return ce_with_targets(student, _hard_targets(frozen.data))


def cosub_pair_loss(y1: Tensor, y2: Tensor, kind: LossKind) -> Tensor:
    return mul(add(distill_loss(y1, y2, kind), distill_loss(y2, y1, kind)),
               0.5)


def paired_label_loss(y1: Tensor, y2: Tensor, labels: np.ndarray,
                      config: CosubConfig) -> Tensor:
    kind = config.label_loss_kind
    return mul(add(label_loss(y1, labels, kind, config.label_smoothing),
                   label_loss(y2, labels, kind, config.label_smoothing)),
               0.5)


def mix(label_part: Tensor, other_part: Tensor, lam: float) -> LossBundle:
    total = add(mul(label_part, lam), mul(other_part, 1 - lam))
    return LossBundle(total, label_part, other_part)


def total_loss(y1: Tensor, y2: Tensor, labels: np.ndarray,
               config: CosubConfig) -> LossBundle:
    config.check()
    if y1.shape != y2.shape:
        raise ShapeError(f'submodel outputs {y1.shape} and {y2.shape} '
                         f'differ in shape')
    return mix(paired_label_loss(y1, y2, labels, config),
               cosub_pair_loss(y1, y2, config.loss_kind), config.lam)

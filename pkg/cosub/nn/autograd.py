"""
Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active record themselves
on it whenever one of their inputs requires a gradient. The tape is
rebuilt for every step: stochastic depth changes the graph topology
from batch to batch.

>>> w = Tensor([1., 2.], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_(w * w)
>>> backward(tape, loss, [w])[0]
array([2., 4.])
>>> sigmoid(Tensor([0.])).data
array([0.5])

Gelu uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))

and its backward rule is the exact derivative of that formula, so
finite differences agree with it to O(eps**2).
"""
import math
import threading
from collections import Counter
from contextlib import contextmanager
from typing import (Any, Callable, Dict, Iterator, List, NamedTuple,
                    Optional, Sequence, Tuple, Union)

import numpy as np

import logging
log = logging.getLogger(__name__)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LAYERNORM_EPS = 1e-6

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class NonScalarLossError(ValueError):
    pass


class Tensor:
    """
    n-dimensional floating point array. The dtype of ``data`` is kept:
    float32 for training, float64 for gradient checking.

    >>> t = Tensor(np.zeros((2, 3), dtype=np.float32))
    >>> t.shape, t.dtype
    ((2, 3), dtype('float32'))
    """
    __slots__ = ('data', 'requires_grad', 'grad', 'node_id', 'name')

    def __init__(self, data: Any, requires_grad: bool = False,
                 name: Optional[str] = None) -> None:
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return stop_gradient(self)

    def __repr__(self) -> str:
        name = '' if self.name is None else f' name={self.name!r}'
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{name})'

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)


class Record(NamedTuple):
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_local = threading.local()


def _tapes() -> List['Tape']:
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def _counters() -> List['OpCounter']:
    if not hasattr(_local, 'counters'):
        _local.counters = []
    return _local.counters


class Tape:
    """
    Ordered list of recorded operations. Records are appended in
    execution order, so every record's inputs precede it.
    """
    def __init__(self) -> None:
        self.records: List[Record] = []
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> 'Tape':
        _tapes().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        popped = _tapes().pop()
        if popped is not self:
            raise AssertionError('tapes exited out of order')

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
               backward_fn: BackwardFn) -> None:
        output.node_id = len(self.records)
        self._produced[id(output)] = output.node_id
        self.records.append(Record(op, inputs, output, backward_fn))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def active_tape() -> Optional[Tape]:
    tapes = _tapes()
    return tapes[-1] if tapes else None


class OpCounter:
    """
    Instrumentation: matmul FLOPs (forward and backward) per section,
    and the number of rows every residual block was applied to.
    """
    def __init__(self) -> None:
        self.flops: Counter = Counter()
        self.block_rows: List[int] = []
        self._sections = ['other']

    @property
    def current(self) -> str:
        return self._sections[-1]

    @contextmanager
    def section(self, name: str) -> Iterator[None]:
        self._sections.append(name)
        try:
            yield
        finally:
            self._sections.pop()

    def add_flops(self, n: int, section: Optional[str] = None) -> None:
        self.flops[self.current if section is None else section] += n

    def record_block(self, rows: int) -> None:
        self.block_rows.append(rows)


@contextmanager
def counting() -> Iterator[OpCounter]:
    counter = OpCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().pop()


def active_counter() -> Optional[OpCounter]:
    counters = _counters()
    return counters[-1] if counters else None


@contextmanager
def counter_section(name: str) -> Iterator[None]:
    counter = active_counter()
    if counter is None:
        yield
    else:
        with counter.section(name):
            yield


def _as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = None if like is None else like.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape)
                 if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f'{op}: shapes {a.shape} and {b.shape} '
                         f'are not broadcastable')


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


# --- primitives

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shape('add', a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make('add', a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shape('sub', a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make('sub', a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shape('mul', a, b)

    def _backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _make('mul', a.data * b.data, (a, b), _backward)


def _coerce_pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product over the last two axes; leading axes
    broadcast.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul: shapes {a.shape} and {b.shape} '
                         f'are not aligned')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f'matmul: batch dims of {a.shape} and '
                         f'{b.shape} are not broadcastable')
    data = np.matmul(a.data, b.data)
    flops = 2 * data.size * a.shape[-1]
    counter = active_counter()
    section = None
    if counter is not None:
        section = counter.current
        counter.add_flops(flops, section)

    def _backward(g):
        if counter is not None:
            counter.add_flops(2 * flops, section)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make('matmul', data, (a, b), _backward)


def relu(x: Tensor) -> Tensor:
    def _backward(g):
        return (g * (x.data > 0),)
    return _make('relu', np.maximum(x.data, 0), (x,), _backward)


def gelu(x: Tensor) -> Tensor:
    z = x.data
    inner = GELU_C * (z + GELU_A * z ** 3)
    t = np.tanh(inner)

    def _backward(g):
        d_inner = GELU_C * (1 + 3 * GELU_A * z ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * z * (1 - t * t) * d_inner),)
    return _make('gelu', 0.5 * z * (1 + t), (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def _backward(g):
        return (g * y * (1 - y),)
    return _make('sigmoid', y, (x,), _backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    def _backward(g):
        return (g * _sigmoid(x.data),)
    return _make('softplus', np.logaddexp(0, x.data), (x,), _backward)


def log_(x: Tensor) -> Tensor:
    def _backward(g):
        return (g / x.data,)
    return _make('log', np.log(x.data), (x,), _backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make('softmax', y, (x,), _backward)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def _backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)
    return _make('log_softmax', y, (x,), _backward)


def layernorm(x: Tensor, scale: Tensor, shift: Tensor,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """
    Normalizes over the last axis, then applies the learnable
    ``scale`` and ``shift`` (both of shape ``(x.shape[-1],)``).
    """
    width = x.shape[-1]
    if scale.shape != (width,) or shift.shape != (width,):
        raise ShapeError(f'layernorm: input {x.shape} with scale '
                         f'{scale.shape} and shift {shift.shape}')
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = centered * inv

    def _backward(g):
        dxhat = g * scale.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, scale.shape),
                _unbroadcast(g, shift.shape))
    return _make('layernorm', xhat * scale.data + shift.data,
                 (x, scale, shift), _backward)


def mean(x: Tensor, axis: Union[None, int, Tuple[int, ...]] = None,
         keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.size(data), 1)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)
    return _make('mean', np.asarray(data), (x,), _backward)


def sum_(x: Tensor, axis: Union[None, int, Tuple[int, ...]] = None,
         keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, x.shape)),)
    return _make('sum', np.asarray(data), (x,), _backward)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = np.array(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError(f'broadcast: cannot broadcast {x.shape} '
                         f'to {tuple(shape)}')

    def _backward(g):
        return (_unbroadcast(g, x.shape),)
    return _make('broadcast', data, (x,), _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f'reshape: cannot reshape {x.shape} '
                         f'to {tuple(shape)}')

    def _backward(g):
        return (g.reshape(x.shape),)
    return _make('reshape', data, (x,), _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)
    return _make('transpose', np.transpose(x.data, axes), (x,), _backward)


def getitem(x: Tensor, key: Any) -> Tensor:
    """Basic (slice/int) indexing only; no fancy indices."""
    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)
    return _make('getitem', np.array(x.data[key]), (x,), _backward)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gathers ``x[rows]`` along the leading (batch) axis."""
    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)
    return _make('take_rows', x.data[rows], (x,), _backward)


def index_add(x: Tensor, rows: np.ndarray, src: Tensor) -> Tensor:
    """
    Copy of ``x`` with ``src[i]`` added onto row ``rows[i]``.
    """
    expected = (len(rows),) + x.shape[1:]
    if src.shape != expected:
        raise ShapeError(f'index_add: source {src.shape} does not match '
                         f'rows of {x.shape} (expected {expected})')
    data = x.data.copy()
    np.add.at(data, rows, src.data)

    def _backward(g):
        return g, g[rows]
    return _make('index_add', data, (x, src), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError('concat: incompatible shapes ' +
                         ', '.join(str(t.shape) for t in tensors))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make('concat', data, tensors, _backward)


def stop_gradient(x: Tensor) -> Tensor:
    """
    Forward identity, backward zero: the result is a fresh leaf that
    never requires a gradient.

    >>> w = Tensor([3.], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * stop_gradient(w))
    >>> backward(tape, loss, [w])[0]
    array([3.])
    """
    return Tensor(x.data.copy(), requires_grad=False, name=x.name)


# --- backward pass

def backward(tape: Tape, loss: Tensor,
             params: Optional[Sequence[Tensor]] = None
             ) -> Optional[List[np.ndarray]]:
    """
    Propagates dLoss/dTensor through ``tape`` in reverse record order.
    Leaf tensors accumulate into ``.grad``; intermediates produced on
    this tape get their (complete) gradient assigned. When ``params``
    is given, returns their gradients, zeros for parameters that the
    loss does not depend on.
    """
    if loss.size != 1:
        raise NonScalarLossError(f'loss must be scalar, got shape '
                                 f'{loss.shape}')
    if loss.requires_grad and tape.produced(loss):
        pending: Dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}
        for rec in reversed(tape.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=inp.dtype)
                if tape.produced(inp):
                    key = id(inp)
                    pending[key] = ig if key not in pending \
                        else pending[key] + ig
                else:
                    inp.grad = ig.copy() if inp.grad is None \
                        else inp.grad + ig
    elif loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None \
            else loss.grad + 1
    if params is None:
        return None
    return [np.zeros_like(p.data) if p.grad is None else p.grad
            for p in params]


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- gradient checking

class GradCheckReport(NamedTuple):
    max_rel_error: float
    passed: bool
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    message: str


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, tolerance: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """
    Compares analytic gradients of the scalar built by ``f`` with
    central differences ``(f(p+eps) - f(p-eps)) / 2 eps``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates where both gradients vanish from
    dominating the report.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f'grad_check needs 64-bit tensors, '
                             f'{p!r} is {p.dtype}')
    saved = [p.grad for p in params]
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)
    for p, g in zip(params, saved):
        p.grad = g

    def _name(i: int, p: Tensor) -> str:
        return p.name if p.name is not None else f'param{i}'

    for i, (p, a) in enumerate(zip(params, analytic)):
        bad = np.argwhere(~np.isfinite(a))
        if len(bad):
            idx = tuple(int(v) for v in bad[0])
            return GradCheckReport(
                math.inf, False, (_name(i, p), idx),
                f'non-finite analytic gradient at {_name(i, p)}{idx}')
    worst_err = 0.0
    worst = None
    for i, (p, a) in enumerate(zip(params, analytic)):
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = f().item()
            p.data[idx] = orig - eps
            f_minus = f().item()
            p.data[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return GradCheckReport(
                    math.inf, False, (_name(i, p), idx),
                    f'non-finite loss when perturbing {_name(i, p)}{idx}')
            numeric = (f_plus - f_minus) / (2 * eps)
            ana = float(a[idx])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), floor)
            if err > worst_err:
                worst_err, worst = err, (_name(i, p), idx)
    passed = worst_err < tolerance
    msg = f'max relative error {worst_err:.3e}'
    if worst is not None:
        msg += f' at {worst[0]}{worst[1]}'
    if not passed:
        log.warning('gradient check failed: %s', msg)
    return GradCheckReport(worst_err, passed, worst, msg)

"""
Residual networks with an ordered list of droppable residual blocks:
a residual MLP classifier and a tiny ViT.

Every block computes only its branch ``r_l(x)``; the residual sum
``x + s_l * r_l(x)`` is applied by :func:`forward` so that stochastic
depth can gate it. A ViT transformer block contributes two droppable
residual blocks (attention, then FFN), so ``depth_blocks`` b gives
``L = 2b``.

Parameter count of the residual MLP (``W`` width, ``H = mlp_ratio*W``
hidden, ``L`` depth, ``D`` input dim, ``C`` classes)::

    stem   D*W + W
    block  2W (layernorm) + W*H + H + H*W + W
    head   2W (layernorm) + W*C + C

>>> residual_mlp_param_count(input_dim=50, width=128, depth=8,
...                          num_classes=10)
274314
"""
import enum
import math
from copy import deepcopy
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from cosub.nn.autograd import (
    Tensor, broadcast_to, concat, gelu, getitem, layernorm, matmul, mean,
    mul, reshape, softmax, transpose)
from cosub.nn.sdepth import DropPattern, SDImpl, apply_layer

import logging
log = logging.getLogger(__name__)

INIT_STD = 0.02


class BlockKind(enum.Enum):
    mlp_ffn = 'mlp-ffn'
    self_attention = 'self-attention'
    linear = 'linear'


class ModelKind(enum.Enum):
    residual_mlp = 'residual-mlp'
    tiny_vit = 'tiny-vit'


@dataclass
class ModelSpec:
    """
    Architecture descriptor; stored in checkpoint headers.
    ``depth`` is the number of residual blocks for the residual MLP and
    the number of transformer blocks for the ViT.
    """
    kind: ModelKind = ModelKind.residual_mlp
    width: int = 64
    depth: int = 4
    num_classes: int = 10
    input_dim: int = 50
    mlp_ratio: int = 1
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    heads: int = 2
    seed: int = 0

    def to_dict(self) -> Dict[str, object]:
        d: Dict[str, object] = dict(self.__dict__)
        d['kind'] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> 'ModelSpec':
        d = dict(d)
        d['kind'] = ModelKind(d['kind'])
        return cls(**d)  # type: ignore

    def architecture(self) -> 'ModelSpec':
        """
        Only the fields that shape parameters: the seed and the fields
        the other model kind reads are reset to defaults.

        >>> a = ModelSpec(kind=ModelKind.tiny_vit, input_dim=64, seed=3)
        >>> a.architecture() == ModelSpec(kind=ModelKind.tiny_vit)
        True
        >>> ModelSpec(image_size=8).architecture() == ModelSpec()
        True
        """
        shared = dict(kind=self.kind, width=self.width, depth=self.depth,
                      num_classes=self.num_classes, mlp_ratio=self.mlp_ratio)
        if self.kind == ModelKind.tiny_vit:
            return ModelSpec(image_size=self.image_size,
                             patch_size=self.patch_size,
                             channels=self.channels, heads=self.heads,
                             **shared)  # type: ignore
        return ModelSpec(input_dim=self.input_dim, **shared)  # type: ignore


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...],
                 std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every value is within 2 std."""
    v = rng.standard_normal(shape)
    bad = np.abs(v) > 2
    while bad.any():
        v[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(v) > 2
    return (v * std).astype(dtype)


class _Params:
    """Named parameter registry with deterministic init order."""
    def __init__(self, prefix: str, rng: np.random.Generator,
                 dtype) -> None:
        self.prefix = prefix
        self.rng = rng
        self.dtype = dtype
        self.tensors: Dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        full = f'{self.prefix}.{name}'
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=full)
        self.tensors[name] = t
        return t

    def weight(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._add(name, trunc_normal(self.rng, shape,
                                            dtype=self.dtype))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape, dtype=self.dtype))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._add(name, np.ones(shape, dtype=self.dtype))


class _Module:
    params: Dict[str, Tensor]

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(t.name, t) for t in self.params.values()]


class ResidualBlock(_Module):
    """
    Branch ``r_l`` of residual block ``index``; maps
    (batch, tokens, width) to the same shape.
    """
    def __init__(self, kind: BlockKind, index: int,
                 params: Dict[str, Tensor], heads: int = 1) -> None:
        self.kind = kind
        self.index = index
        self.params = params
        self.heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        if self.kind == BlockKind.linear:
            return matmul(x, p['w']) + p['b']
        h = layernorm(x, p['ln_scale'], p['ln_shift'])
        if self.kind == BlockKind.mlp_ffn:
            h = gelu(matmul(h, p['w1']) + p['b1'])
            return matmul(h, p['w2']) + p['b2']
        return self._attention(h)

    def _attention(self, h: Tensor) -> Tensor:
        p = self.params
        batch, tokens, width = h.shape
        head_dim = width // self.heads
        qkv = matmul(h, p['w_qkv']) + p['b_qkv']
        qkv = reshape(qkv, (batch, tokens, 3, self.heads, head_dim))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (getitem(qkv, i) for i in range(3))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))),
                     1.0 / math.sqrt(head_dim))
        out = matmul(softmax(scores), v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (batch, tokens, width))
        return matmul(out, p['w_out']) + p['b_out']

    def __repr__(self) -> str:
        return f'ResidualBlock({self.kind.value}, {self.index})'


def ffn_block(index: int, width: int, hidden: int,
              rng: np.random.Generator, dtype=np.float32) -> ResidualBlock:
    reg = _Params(f'blocks.{index}', rng, dtype)
    reg.ones('ln_scale', (width,))
    reg.zeros('ln_shift', (width,))
    reg.weight('w1', (width, hidden))
    reg.zeros('b1', (hidden,))
    reg.weight('w2', (hidden, width))
    reg.zeros('b2', (width,))
    return ResidualBlock(BlockKind.mlp_ffn, index, reg.tensors)


def attention_block(index: int, width: int, heads: int,
                    rng: np.random.Generator,
                    dtype=np.float32) -> ResidualBlock:
    if width % heads:
        raise ValueError(f'width {width} is not divisible by '
                         f'{heads} heads')
    reg = _Params(f'blocks.{index}', rng, dtype)
    reg.ones('ln_scale', (width,))
    reg.zeros('ln_shift', (width,))
    reg.weight('w_qkv', (width, 3 * width))
    reg.zeros('b_qkv', (3 * width,))
    reg.weight('w_out', (width, width))
    reg.zeros('b_out', (width,))
    return ResidualBlock(BlockKind.self_attention, index, reg.tensors,
                         heads=heads)


def linear_block(index: int, width: int, rng: np.random.Generator,
                 std: float = INIT_STD, dtype=np.float64) -> ResidualBlock:
    reg = _Params(f'blocks.{index}', rng, dtype)
    reg._add('w', trunc_normal(rng, (width, width), std=std, dtype=dtype))
    reg._add('b', trunc_normal(rng, (width,), std=std, dtype=dtype))
    return ResidualBlock(BlockKind.linear, index, reg.tensors)


class VectorStem(_Module):
    """Linear embedding of feature vectors into a single token."""
    def __init__(self, params: Dict[str, Tensor]) -> None:
        self.params = params

    def __call__(self, batch: np.ndarray) -> Tensor:
        p = self.params
        batch = np.asarray(batch)
        x = Tensor(batch.reshape(batch.shape[0], -1).astype(p['w'].dtype))
        x = matmul(x, p['w']) + p['b']
        return reshape(x, (x.shape[0], 1, x.shape[1]))


class PatchStem(_Module):
    """Patchify, linear patch embedding, class token, positions."""
    def __init__(self, params: Dict[str, Tensor], image_size: int,
                 patch_size: int, channels: int) -> None:
        self.params = params
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def patchify(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, None]
        b, c, h, w = images.shape
        if (c, h, w) != (self.channels, self.image_size, self.image_size):
            raise ValueError(f'expected images of shape '
                             f'(B, {self.channels}, {self.image_size}, '
                             f'{self.image_size}), got {images.shape}')
        p = self.patch_size
        g = h // p
        x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, c * p * p)

    def __call__(self, batch: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(self.patchify(batch).astype(p['w'].dtype))
        x = matmul(x, p['w']) + p['b']
        b, n, width = x.shape
        cls = broadcast_to(p['cls_token'], (b, 1, width))
        return concat([cls, x], axis=1) + p['pos_embed']


class Head(_Module):
    """Layernorm and linear classifier over the pooled token."""
    def __init__(self, params: Dict[str, Tensor], pool: str) -> None:
        self.params = params
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        if self.pool == 'cls':
            x = getitem(x, (slice(None), 0))
        else:
            x = mean(x, axis=1)
        x = layernorm(x, p['ln_scale'], p['ln_shift'])
        return matmul(x, p['w']) + p['b']


def _head(width: int, num_classes: int, rng: np.random.Generator, dtype,
          pool: str) -> Head:
    reg = _Params('head', rng, dtype)
    reg.ones('ln_scale', (width,))
    reg.zeros('ln_shift', (width,))
    reg.weight('w', (width, num_classes))
    reg.zeros('b', (num_classes,))
    return Head(reg.tensors, pool)


class Model:
    """
    Parameter set theta: stem, the ordered droppable residual blocks
    and the classification head.
    """
    def __init__(self, spec: ModelSpec, stem: _Module,
                 blocks: List[ResidualBlock], head: Head,
                 blocks_per_unit: int = 1) -> None:
        self.spec = spec
        self.stem = stem
        self.blocks = blocks
        self.head = head
        self.blocks_per_unit = blocks_per_unit

    @property
    def num_classes(self) -> int:
        return self.head.params['w'].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def dtype(self) -> np.dtype:
        return self.head.params['w'].dtype

    def parameters(self) -> List[Tuple[str, Tensor]]:
        named = list(self.stem.parameters())
        for block in self.blocks:
            named.extend(block.parameters())
        named.extend(self.head.parameters())
        return named

    def tensors(self) -> List[Tensor]:
        return [t for _, t in self.parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        named = dict(self.parameters())
        if set(named) != set(state):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise ValueError(f'state mismatch: missing {missing}, '
                             f'unexpected {extra}')
        for name, t in named.items():
            if state[name].shape != t.shape:
                raise ValueError(f'{name}: shape {state[name].shape} != '
                                 f'{t.shape}')
            t.data = np.array(state[name], dtype=t.dtype)

    def copy(self, requires_grad: bool = True) -> 'Model':
        twin = deepcopy(self)
        for t in twin.tensors():
            t.requires_grad = requires_grad
            t.grad = None
            t.node_id = None
        return twin

    def unit_of(self, layer: int) -> int:
        """Depth unit (transformer block) of residual block ``layer``."""
        return layer // self.blocks_per_unit

    @property
    def num_units(self) -> int:
        return self.num_layers // self.blocks_per_unit

    def embed(self, batch: np.ndarray) -> Tensor:
        return self.stem(batch)

    def readout(self, x: Tensor) -> Tensor:
        return self.head(x)


def residual_mlp_param_count(input_dim: int, width: int, depth: int,
                             num_classes: int, mlp_ratio: int = 1) -> int:
    hidden = mlp_ratio * width
    block = 2 * width + width * hidden + hidden + hidden * width + width
    return (input_dim * width + width + depth * block
            + 2 * width + width * num_classes + num_classes)


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if value < 1:
            raise ValueError(f'{name} must be >= 1, got {value}')


def _residual_mlp(spec: ModelSpec, dtype) -> Model:
    rng = np.random.default_rng(spec.seed)
    reg = _Params('stem', rng, dtype)
    reg.weight('w', (spec.input_dim, spec.width))
    reg.zeros('b', (spec.width,))
    stem = VectorStem(reg.tensors)
    blocks = [ffn_block(l, spec.width, spec.mlp_ratio * spec.width, rng,
                        dtype)
              for l in range(spec.depth)]
    head = _head(spec.width, spec.num_classes, rng, dtype, pool='mean')
    return Model(spec, stem, blocks, head)


def build_residual_mlp(width: int, depth: int, num_classes: int,
                       input_dim: int, seed: int = 0, mlp_ratio: int = 1,
                       dtype=np.float32) -> Model:
    _check_dims(width=width, depth=depth, num_classes=num_classes,
                input_dim=input_dim, mlp_ratio=mlp_ratio)
    return _residual_mlp(
        ModelSpec(kind=ModelKind.residual_mlp, width=width, depth=depth,
                  num_classes=num_classes, input_dim=input_dim,
                  mlp_ratio=mlp_ratio, seed=seed), dtype)


def build_tiny_vit(image_size: int, patch_size: int, width: int,
                   depth_blocks: int, heads: int, num_classes: int,
                   seed: int = 0, channels: int = 1, mlp_ratio: int = 2,
                   dtype=np.float32) -> Model:
    _check_dims(image_size=image_size, patch_size=patch_size, width=width,
                depth_blocks=depth_blocks, heads=heads,
                num_classes=num_classes, channels=channels)
    if image_size % patch_size:
        raise ValueError(f'image size {image_size} is not divisible by '
                         f'patch size {patch_size}')
    spec = ModelSpec(kind=ModelKind.tiny_vit, width=width,
                     depth=depth_blocks, num_classes=num_classes,
                     input_dim=channels * image_size * image_size,
                     mlp_ratio=mlp_ratio, image_size=image_size,
                     patch_size=patch_size, channels=channels, heads=heads,
                     seed=seed)
    rng = np.random.default_rng(seed)
    num_patches = (image_size // patch_size) ** 2
    reg = _Params('stem', rng, dtype)
    reg.weight('w', (channels * patch_size * patch_size, width))
    reg.zeros('b', (width,))
    reg.weight('cls_token', (1, 1, width))
    reg.weight('pos_embed', (1, num_patches + 1, width))
    stem = PatchStem(reg.tensors, image_size, patch_size, channels)
    blocks: List[ResidualBlock] = []
    for b in range(depth_blocks):
        blocks.append(attention_block(2 * b, width, heads, rng, dtype))
        blocks.append(ffn_block(2 * b + 1, width, mlp_ratio * width, rng,
                                dtype))
    head = _head(width, num_classes, rng, dtype, pool='cls')
    return Model(spec, stem, blocks, head, blocks_per_unit=2)


def linear_classifier(input_dim: int, num_classes: int, width: int,
                      seed: int = 0, dtype=np.float32) -> Model:
    """Stem and head only (``L = 0``)."""
    _check_dims(input_dim=input_dim, num_classes=num_classes, width=width)
    return _residual_mlp(
        ModelSpec(kind=ModelKind.residual_mlp, width=width, depth=0,
                  num_classes=num_classes, input_dim=input_dim, seed=seed),
        dtype)


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    """Builds ``spec``; the returned model carries ``spec`` itself."""
    if spec.kind == ModelKind.tiny_vit:
        model = build_tiny_vit(spec.image_size, spec.patch_size, spec.width,
                               spec.depth, spec.heads, spec.num_classes,
                               seed=spec.seed, channels=spec.channels,
                               mlp_ratio=spec.mlp_ratio, dtype=dtype)
    elif spec.depth == 0:
        model = linear_classifier(spec.input_dim, spec.num_classes,
                                  spec.width, seed=spec.seed, dtype=dtype)
    else:
        model = build_residual_mlp(spec.width, spec.depth, spec.num_classes,
                                   spec.input_dim, seed=spec.seed,
                                   mlp_ratio=spec.mlp_ratio, dtype=dtype)
    model.spec = replace(spec)
    return model


def forward(model: Model, batch: np.ndarray,
            pattern: Optional[DropPattern] = None,
            sd_impl: SDImpl = SDImpl.efficient) -> Tensor:
    """
    Logits of shape (B, num_classes). Without a pattern every block is
    applied unscaled (inference); with one, blocks are gated per row
    and kept residuals carry the training-time scale.
    """
    x = model.embed(batch)
    if pattern is None:
        for block in model.blocks:
            x = x + block(x)
        return model.readout(x)
    if pattern.num_layers != model.num_layers:
        raise ValueError(f'pattern has {pattern.num_layers} layers, model '
                         f'has {model.num_layers}')
    if pattern.batch_size != x.shape[0]:
        raise ValueError(f'pattern batch {pattern.batch_size} != '
                         f'{x.shape[0]}')
    for l, block in enumerate(model.blocks):
        x = apply_layer(x, block, pattern, l, sd_impl)
    return model.readout(x)

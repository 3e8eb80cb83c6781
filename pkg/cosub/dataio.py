"""
Desk-scale datasets: synthetic generators, the IDX image/label
container, minimal augmentation and cosub batching.

Synthetic generative processes (``n`` samples, ``classes`` classes,
labels ``arange(n) % classes`` shuffled, so every class count is
within one of ``n / classes``):

``gaussian-mixture``
    class centroids ``c_k ~ N(0, separation^2 I)`` in ``dims``
    dimensions; a sample is ``c_k + noise * N(0, I)``.

``spirals``
    arm ``k`` starts at angle ``2 pi k / classes``; a sample at
    ``t ~ U(0, 1)`` sits at radius ``t`` and angle ``start + 3 pi t``
    in the first two dimensions, plus ``noise * N(0, I)`` on every
    dimension.

IDX files are big endian: a ``uint32`` magic (``0x00000803`` for rank-3
``uint8`` images, ``0x00000801`` for ``uint8`` labels), one ``uint32``
per dimension, then the raw bytes.
"""
import enum
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, NamedTuple, Optional, Tuple, Union

import numpy as np

from cosub.utils.fio import ensure_directory, ensure_path

import logging
log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class SyntheticKind(enum.Enum):
    gaussian_mixture = 'gaussian-mixture'
    spirals = 'spirals'


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.samples) == 0:
            raise ValueError('dataset is empty')
        if len(self.samples) != len(self.labels):
            raise ValueError(f'{len(self.samples)} samples but '
                             f'{len(self.labels)} labels')
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f'labels must be in [0, {self.num_classes})')

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, rows: np.ndarray, **meta: Any) -> 'Dataset':
        return Dataset(self.samples[rows], self.labels[rows],
                       self.num_classes, dict(self.meta, **meta))

    def split(self, n_test: int) -> Tuple['Dataset', 'Dataset']:
        """Last ``n_test`` rows are the held-out split."""
        if not 0 < n_test < len(self):
            raise ValueError(f'cannot hold out {n_test} of {len(self)}')
        cut = len(self) - n_test
        return (self.subset(np.arange(cut), split='train'),
                self.subset(np.arange(cut, len(self)), split='test'))


def _balanced_labels(n: int, classes: int,
                     rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes).astype(np.int64)


def gen_synthetic(kind: SyntheticKind, n: int, dims: int, classes: int,
                  noise: float, seed: int,
                  separation: float = 1.0) -> Dataset:
    if classes < 2:
        raise ValueError(f'need at least 2 classes: {classes}')
    if n < 1 or dims < 1:
        raise ValueError(f'bad dataset size n={n} dims={dims}')
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, classes, rng)
    if kind == SyntheticKind.gaussian_mixture:
        centroids = separation * rng.standard_normal((classes, dims))
        x = centroids[labels] + noise * rng.standard_normal((n, dims))
    else:
        if dims < 2:
            raise ValueError('spirals need at least 2 dimensions')
        t = rng.random(n)
        angle = 2 * np.pi * labels / classes + 3 * np.pi * t
        x = np.zeros((n, dims))
        x[:, 0] = t * np.cos(angle)
        x[:, 1] = t * np.sin(angle)
        x += noise * rng.standard_normal((n, dims))
    meta = dict(kind=kind.value, n=n, dims=dims, classes=classes,
                noise=noise, seed=seed, separation=separation)
    return Dataset(x.astype(np.float32), labels, classes, meta)


# --- IDX container

def _read_idx(path: Union[str, Path], magic: int, rank: int
              ) -> np.ndarray:
    buf = ensure_path(path).read_bytes()
    head = 4 + 4 * rank
    if len(buf) < head:
        raise IdxTruncatedError(f'{path}: header truncated')
    found, = struct.unpack_from('>I', buf, 0)
    if found != magic:
        raise IdxMagicError(f'{path}: magic 0x{found:08x}, expected '
                            f'0x{magic:08x}')
    dims = struct.unpack_from('>' + 'I' * rank, buf, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) - head < size:
        raise IdxTruncatedError(f'{path}: payload has {len(buf) - head} '
                                f'bytes, header declares {size}')
    if len(buf) - head > size:
        raise IdxFormatError(f'{path}: {len(buf) - head - size} trailing '
                             f'bytes')
    return np.frombuffer(buf, dtype=np.uint8, count=size,
                         offset=head).reshape(dims)


def load_idx_arrays(images_path: Union[str, Path],
                    labels_path: Union[str, Path]
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images (N, rows, cols) and labels (N,)."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f'{len(images)} images but '
                                    f'{len(labels)} labels')
    return images, labels


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             num_classes: Optional[int] = None) -> Dataset:
    """
    Pixels scaled to [0, 1]; ``num_classes`` defaults to the largest
    label plus one.
    """
    images, labels = load_idx_arrays(images_path, labels_path)
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images.astype(np.float32) / np.float32(255), labels,
                   num_classes, dict(images=str(images_path),
                                     labels=str(labels_path)))


def write_idx_arrays(images: np.ndarray, labels: np.ndarray,
                     images_path: Union[str, Path],
                     labels_path: Union[str, Path]) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f'expected uint8 (N, rows, cols) images, got '
                         f'{images.dtype} {images.shape}')
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ValueError(f'expected uint8 (N,) labels, got {labels.dtype} '
                         f'{labels.shape}')
    for path, magic, arr in ((images_path, IMAGES_MAGIC, images),
                             (labels_path, LABELS_MAGIC, labels)):
        path = ensure_path(path)
        ensure_directory(path.parent)
        head = struct.pack('>I' + 'I' * arr.ndim, magic, *arr.shape)
        path.write_bytes(head + arr.tobytes())


def write_idx(dataset: Dataset, images_path: Union[str, Path],
              labels_path: Union[str, Path]) -> None:
    """Inverse of :func:`load_idx` for datasets of [0, 1] images."""
    pixels = np.rint(dataset.samples.astype(np.float64) * 255)
    write_idx_arrays(np.clip(pixels, 0, 255).astype(np.uint8),
                     dataset.labels.astype(np.uint8), images_path,
                     labels_path)


# --- augmentation and batching

_NOISE = re.compile(r'^noise\(([^)]+)\)$')


@dataclass(frozen=True)
class AugmentPolicy:
    """
    ``none``, ``flip``, ``noise(sigma)`` or ``flip+noise(sigma)``.

    >>> AugmentPolicy.parse('flip+noise(0.1)')
    AugmentPolicy(flip=True, noise=0.1)
    >>> str(AugmentPolicy.parse('none'))
    'none'
    """
    flip: bool = False
    noise: float = 0.0

    @classmethod
    def parse(cls, s: str) -> 'AugmentPolicy':
        flip, noise = False, 0.0
        s = s.strip()
        if s in ('', 'none'):
            return cls()
        for part in s.split('+'):
            part = part.strip()
            m = _NOISE.match(part)
            if part == 'flip':
                flip = True
            elif m:
                noise = float(m.group(1))
                if noise < 0:
                    raise ValueError(f'noise must be >= 0: {s!r}')
            else:
                raise ValueError(f'unknown augmentation {part!r} in {s!r}')
        return cls(flip, noise)

    def __str__(self) -> str:
        parts = (['flip'] if self.flip else []) + \
            ([f'noise({self.noise})'] if self.noise else [])
        return '+'.join(parts) or 'none'


def hflip(x: np.ndarray) -> np.ndarray:
    """Mirror the last axis (image width, or feature order of vectors)."""
    return x[..., ::-1]


def augment(x: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Independent per-sample transforms; never touches labels."""
    if not policy.flip and not policy.noise:
        return x
    out = np.array(x, copy=True)
    if policy.flip:
        rows = rng.random(len(out)) < 0.5
        out[rows] = hflip(out[rows])
    if policy.noise:
        out = out + (policy.noise * rng.standard_normal(out.shape)
                     ).astype(out.dtype)
    return out


class Batch(NamedTuple):
    """
    ``copy_id`` is set on duplicated batches: rows ``2i`` and ``2i+1``
    are the two copies (ids 0 and 1) of augmented sample ``i``.
    """
    x: np.ndarray
    y: np.ndarray
    copy_id: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.x)

    @property
    def duplicated(self) -> bool:
        return self.copy_id is not None


def duplicate(batch: Batch) -> Batch:
    if batch.duplicated:
        return batch
    return Batch(np.repeat(batch.x, 2, axis=0), np.repeat(batch.y, 2),
                 np.tile(np.array([0, 1], dtype=np.int8), len(batch)))


def originals(batch: Batch) -> Batch:
    """One row per sample of a duplicated batch."""
    if not batch.duplicated:
        return batch
    return Batch(batch.x[0::2], batch.y[0::2])


def make_cosub_batches(dataset: Dataset, batch_size: int, duplicate_rows: bool,
                       rng: np.random.Generator,
                       policy: AugmentPolicy = AugmentPolicy()
                       ) -> Iterator[Batch]:
    """
    One shuffled epoch of ``len(dataset) // batch_size`` batches; the
    remainder is dropped so every batch has the same ``B``. Samples are
    augmented first and duplicated afterwards.
    """
    if not 1 <= batch_size <= len(dataset):
        raise ValueError(f'batch size {batch_size} not in [1, '
                         f'{len(dataset)}]')
    order = rng.permutation(len(dataset))
    for i in range(len(dataset) // batch_size):
        rows = order[i * batch_size:(i + 1) * batch_size]
        batch = Batch(augment(dataset.samples[rows], policy, rng),
                      dataset.labels[rows])
        yield duplicate(batch) if duplicate_rows else batch

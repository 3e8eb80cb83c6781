"""
Self-describing checkpoint container::

    magic      8 bytes  b'COSUBCKP'
    version    uint32 little endian
    length     uint32 little endian, size of the JSON header
    header     utf-8 JSON: {"arch": ModelSpec, "tensors": [[name, shape]...]}
    payload    little-endian float32 arrays in manifest order
"""
import json
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple, Union

import numpy as np

from cosub.nn.blocks import Model, ModelSpec, build_model
from cosub.utils.fio import ensure_path

import logging
log = logging.getLogger(__name__)

MAGIC = b'COSUBCKP'
VERSION = 1
_PREFIX = struct.Struct('<8sII')
_FLOAT = np.dtype('<f4')


class CheckpointError(ValueError):
    pass


class Header(NamedTuple):
    version: int
    arch: ModelSpec
    tensors: List[Tuple[str, Tuple[int, ...]]]


def dumps(model: Model) -> bytes:
    manifest = [[name, list(t.shape)] for name, t in model.parameters()]
    header = json.dumps({'arch': model.spec.to_dict(), 'tensors': manifest},
                        sort_keys=True).encode('utf-8')
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    for _, t in model.parameters():
        chunks.append(np.ascontiguousarray(t.data, dtype=_FLOAT).tobytes())
    return b''.join(chunks)


def _parse_header(buf: bytes) -> Tuple[Header, int]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError('checkpoint is truncated')
    magic, version, length = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f'bad checkpoint magic: {magic!r}')
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    end = _PREFIX.size + length
    if len(buf) < end:
        raise CheckpointError('checkpoint header is truncated')
    doc = json.loads(buf[_PREFIX.size:end].decode('utf-8'))
    tensors = [(name, tuple(shape)) for name, shape in doc['tensors']]
    return Header(version, ModelSpec.from_dict(doc['arch']), tensors), end


def same_architecture(a: ModelSpec, b: ModelSpec) -> bool:
    """Equal up to the seed and the fields the model kind ignores."""
    return a.architecture() == b.architecture()


def loads(buf: bytes, expect: Union[ModelSpec, None] = None) -> Model:
    header, offset = _parse_header(buf)
    if expect is not None and not same_architecture(expect, header.arch):
        raise CheckpointError(f'checkpoint architecture {header.arch} does '
                              f'not match declared {expect}')
    state: Dict[str, np.ndarray] = {}
    for name, shape in header.tensors:
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _FLOAT.itemsize
        if len(buf) < offset + nbytes:
            raise CheckpointError(f'payload truncated at {name}')
        state[name] = np.frombuffer(buf, dtype=_FLOAT, count=count,
                                    offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f'{len(buf) - offset} trailing bytes')
    model = build_model(header.arch, dtype=np.float32)
    try:
        model.load_state(state)
    except ValueError as e:
        raise CheckpointError(str(e))
    return model


def save_checkpoint(path: Union[str, Path], model: Model) -> Path:
    path = ensure_path(path)
    path.write_bytes(dumps(model))
    log.info('checkpoint written: %s', path)
    return path


def load_checkpoint(path: Union[str, Path],
                    expect: Union[ModelSpec, None] = None) -> Model:
    return loads(ensure_path(path).read_bytes(), expect)


def read_header(path: Union[str, Path]) -> Header:
    return _parse_header(ensure_path(path).read_bytes())[0]

import struct
from dataclasses import replace

import numpy as np
import pytest

from cosub.tests import TestSetup, seeded
from cosub.nn.blocks import (
    ModelKind, ModelSpec, build_model, build_residual_mlp, build_tiny_vit,
    linear_classifier)
from cosub.nn.checkpoint import (
    MAGIC, CheckpointError, dumps, load_checkpoint, loads, read_header,
    save_checkpoint)

test = TestSetup(__name__, ensure_empty=True)
log = test.log


def _trained_like(model, seed=0):
    rng = seeded(seed)
    for t in model.tensors():
        t.data = rng.standard_normal(t.shape).astype(t.dtype)
    return model


def test_round_trip_is_bit_exact():
    for model in (build_residual_mlp(8, 3, 4, 5, seed=1),
                  build_tiny_vit(image_size=8, patch_size=4, width=8,
                                 depth_blocks=2, heads=2, num_classes=3)):
        _trained_like(model)
        path = save_checkpoint(test.file_path('m.ckpt'), model)
        back = load_checkpoint(path, expect=model.spec)
        assert back.spec == model.spec
        for (n1, t1), (n2, t2) in zip(model.parameters(), back.parameters()):
            assert n1 == n2
            assert t1.data.tobytes() == t2.data.tobytes()
        assert dumps(back) == path.read_bytes()


def test_header_describes_tensors():
    model = build_residual_mlp(8, 2, 4, 5)
    path = save_checkpoint(test.file_path('h.ckpt'), model)
    header = read_header(path)
    assert header.version == 1
    assert header.arch == model.spec
    assert [n for n, _ in header.tensors] == [n for n, _ in
                                              model.parameters()]
    assert path.read_bytes()[:8] == MAGIC


def test_float64_models_are_stored_as_float32():
    model = _trained_like(build_residual_mlp(4, 1, 2, 3, dtype=np.float64))
    back = loads(dumps(model))
    assert back.dtype == np.float32
    np.testing.assert_array_equal(
        back.tensors()[0].data, model.tensors()[0].data.astype(np.float32))


def test_corrupt_checkpoints_rejected():
    buf = dumps(build_residual_mlp(4, 1, 2, 3))
    with pytest.raises(CheckpointError):
        loads(b'NOTACKPT' + buf[8:])
    with pytest.raises(CheckpointError):
        loads(buf[:8] + struct.pack('<I', 99) + buf[12:])
    with pytest.raises(CheckpointError):
        loads(buf[:-4])
    with pytest.raises(CheckpointError):
        loads(buf + b'\0\0\0\0')
    with pytest.raises(CheckpointError):
        loads(buf[:10])


def test_architecture_mismatch_rejected():
    buf = dumps(build_residual_mlp(4, 1, 2, 3))
    with pytest.raises(CheckpointError):
        loads(buf, expect=ModelSpec(width=4, depth=2, num_classes=2,
                                    input_dim=3))


def test_linear_model_round_trip():
    model = _trained_like(linear_classifier(input_dim=5, num_classes=3,
                                            width=4))
    back = loads(dumps(model), expect=model.spec)
    assert back.num_layers == 0 and back.spec == model.spec
    assert dumps(back) == dumps(model)


def test_vit_checkpoint_ignores_vector_input_dim():
    spec = ModelSpec(kind=ModelKind.tiny_vit, width=8, depth=1, heads=2,
                     image_size=8, patch_size=4, num_classes=3)
    model = _trained_like(build_model(spec))
    assert model.spec.input_dim == spec.input_dim
    back = loads(dumps(model), expect=replace(spec, input_dim=64, seed=4))
    assert back.spec == spec
    with pytest.raises(CheckpointError):
        loads(dumps(model), expect=replace(spec, patch_size=2))

import struct

import numpy as np
import pytest

from cosub.tests import TestSetup, seeded
from cosub import dataio
from cosub.dataio import (
    AugmentPolicy, Batch, Dataset, IdxCountMismatchError, IdxFormatError,
    IdxMagicError, IdxTruncatedError, SyntheticKind, augment, duplicate,
    gen_synthetic, hflip, load_idx, load_idx_arrays, make_cosub_batches,
    originals, write_idx, write_idx_arrays)

test = TestSetup(__name__, ensure_empty=True)
log = test.log


def test_docs():
    import doctest
    r = doctest.testmod(dataio)
    assert r.attempted > 0
    assert r.failed == 0


def test_synthetic_is_balanced_and_deterministic():
    for kind in SyntheticKind:
        ds = gen_synthetic(kind, 1003, 5, 10, noise=0.3, seed=7)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == 1003
        assert ds.samples.shape == (1003, 5)
        assert ds.samples.dtype == np.float32
        again = gen_synthetic(kind, 1003, 5, 10, noise=0.3, seed=7)
        assert again.samples.tobytes() == ds.samples.tobytes()
        assert again.labels.tobytes() == ds.labels.tobytes()
        other = gen_synthetic(kind, 1003, 5, 10, noise=0.3, seed=8)
        assert other.samples.tobytes() != ds.samples.tobytes()


def test_noiseless_mixture_is_separable_by_nearest_centroid():
    ds = gen_synthetic(SyntheticKind.gaussian_mixture, 500, 20, 10,
                       noise=0.0, seed=3)
    centroids = np.stack([ds.samples[ds.labels == k].mean(axis=0)
                          for k in range(10)])
    d = ((ds.samples[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert (d.argmin(axis=1) == ds.labels).all()


def test_synthetic_rejects_bad_sizes():
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticKind.gaussian_mixture, 10, 2, 1, 0.1, 0)
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticKind.spirals, 10, 1, 3, 0.1, 0)


def test_dataset_split():
    ds = gen_synthetic(SyntheticKind.gaussian_mixture, 100, 3, 4, 1.0, 0)
    train, held = ds.split(30)
    assert (len(train), len(held)) == (70, 30)
    assert train.meta['split'] == 'train'
    assert held.meta['split'] == 'test'
    assert held.meta['seed'] == 0
    np.testing.assert_array_equal(held.samples, ds.samples[70:])
    with pytest.raises(ValueError):
        ds.split(100)
    with pytest.raises(ValueError):
        Dataset(ds.samples, ds.labels[:5], 4)
    with pytest.raises(ValueError):
        Dataset(ds.samples, ds.labels, 2)


def _golden(tag):
    images = test.file_path(f'{tag}-images.idx')
    labels = test.file_path(f'{tag}-labels.idx')
    with open(images, 'wb') as fp:
        fp.write(struct.pack('>IIII', 0x803, 2, 3, 3))
        fp.write(bytes(range(9)))
        fp.write(bytes([255] * 9))
    with open(labels, 'wb') as fp:
        fp.write(struct.pack('>II', 0x801, 2))
        fp.write(bytes([1, 0]))
    return images, labels


def test_idx_golden_fixture():
    images, labels = _golden('golden')
    raw, y = load_idx_arrays(images, labels)
    assert raw.shape == (2, 3, 3)
    assert raw[0, 1, 2] == 5
    assert list(y) == [1, 0]
    ds = load_idx(images, labels)
    assert ds.num_classes == 2
    assert ds.samples.dtype == np.float32
    assert ds.samples[1].min() == 1.0
    assert ds.samples[0, 0, 0] == 0.0
    assert ds.samples[0, 2, 2] == np.float32(8) / np.float32(255)


def test_idx_errors():
    images, labels = _golden('bad')
    with open(images, 'rb') as fp:
        good = fp.read()

    def rewrite(data):
        with open(images, 'wb') as fp:
            fp.write(data)

    rewrite(struct.pack('>I', 0x801) + good[4:])
    with pytest.raises(IdxMagicError):
        load_idx(images, labels)
    rewrite(good[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(images, labels)
    rewrite(good[:6])
    with pytest.raises(IdxTruncatedError):
        load_idx(images, labels)
    rewrite(good + b'\0')
    with pytest.raises(IdxFormatError):
        load_idx(images, labels)
    rewrite(struct.pack('>IIII', 0x803, 3, 3, 3) + bytes(27))
    with pytest.raises(IdxCountMismatchError) as e:
        load_idx(images, labels)
    assert isinstance(e.value, ValueError)


def test_idx_round_trip():
    rng = seeded(4)
    raw = rng.integers(0, 256, size=(5, 4, 6)).astype(np.uint8)
    y = rng.integers(0, 10, size=5).astype(np.uint8)
    ip, lp = test.file_path('rt-i.idx'), test.file_path('rt-l.idx')
    write_idx_arrays(raw, y, ip, lp)
    back, back_y = load_idx_arrays(ip, lp)
    assert back.tobytes() == raw.tobytes()
    assert back_y.tobytes() == y.tobytes()
    ds = load_idx(ip, lp, num_classes=10)
    write_idx(ds, test.file_path('rt2-i.idx'), test.file_path('rt2-l.idx'))
    with open(ip, 'rb') as a, open(test.file_path('rt2-i.idx'), 'rb') as b:
        assert a.read() == b.read()
    with pytest.raises(ValueError):
        write_idx_arrays(raw.astype(np.float32), y, ip, lp)


def test_augment_policy():
    assert AugmentPolicy.parse(' none ') == AugmentPolicy()
    p = AugmentPolicy.parse('noise(0.5)+flip')
    assert p == AugmentPolicy(True, 0.5)
    assert str(p) == 'flip+noise(0.5)'
    assert AugmentPolicy.parse(str(p)) == p
    for bad in ('blur', 'noise(-1)', 'noise()'):
        with pytest.raises(ValueError):
            AugmentPolicy.parse(bad)


def test_augment():
    x = seeded(0).standard_normal((400, 3, 4)).astype(np.float32)
    assert augment(x, AugmentPolicy(), seeded(1)) is x
    np.testing.assert_array_equal(hflip(hflip(x)), x)
    flipped = augment(x, AugmentPolicy(flip=True), seeded(1))
    same = (flipped == x).reshape(400, -1).all(axis=1)
    mirrored = (flipped == hflip(x)).reshape(400, -1).all(axis=1)
    assert (same | mirrored).all()
    assert 100 < mirrored.sum() < 300
    noisy = augment(x, AugmentPolicy(noise=0.1), seeded(1))
    assert noisy.dtype == np.float32
    mean_abs = float(np.abs(noisy - x).mean())
    assert abs(mean_abs - 0.1 * np.sqrt(2 / np.pi)) < 0.005


def test_duplicate_rows():
    b = Batch(np.arange(6, dtype=np.float32).reshape(3, 2),
              np.array([2, 0, 1]))
    d = duplicate(b)
    assert d.duplicated and not b.duplicated
    assert len(d) == 6
    np.testing.assert_array_equal(d.x[0::2], d.x[1::2])
    np.testing.assert_array_equal(d.y, [2, 2, 0, 0, 1, 1])
    np.testing.assert_array_equal(d.copy_id, [0, 1, 0, 1, 0, 1])
    assert duplicate(d) is d
    o = originals(d)
    np.testing.assert_array_equal(o.x, b.x)
    np.testing.assert_array_equal(o.y, b.y)


def test_batches_cover_epoch():
    ds = gen_synthetic(SyntheticKind.gaussian_mixture, 103, 3, 4, 1.0, 0)
    ds.samples[:, 0] = np.arange(103)
    batches = list(make_cosub_batches(ds, 10, False, seeded(2)))
    assert len(batches) == 10
    seen = np.concatenate([b.x[:, 0] for b in batches]).astype(int)
    assert len(set(seen)) == 100
    again = list(make_cosub_batches(ds, 10, False, seeded(2)))
    for a, b in zip(batches, again):
        assert a.x.tobytes() == b.x.tobytes()
    dup = list(make_cosub_batches(ds, 10, True, seeded(2),
                                  AugmentPolicy(noise=0.5)))
    assert all(len(b) == 20 and b.duplicated for b in dup)
    for b in dup:
        np.testing.assert_array_equal(b.x[0::2], b.x[1::2])
    with pytest.raises(ValueError):
        list(make_cosub_batches(ds, 0, False, seeded(2)))
    with pytest.raises(ValueError):
        list(make_cosub_batches(ds, 104, False, seeded(2)))

import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prunelab.data import (BadMagicError, BatchIterator, CountMismatchError, Dataset, TruncatedFileError,
                           load_idx, normalize, read_idx_images, synth_blobs, write_idx)
from prunelab.engine import Network
from prunelab.attack import predict
from prunelab.train import Natural, TrainConfig, train

from helpers import DESK_CNN, INPUT


def _images_file(path, n, rows, cols, pixels, magic=0x803):
    path.write_bytes(struct.pack(">4I", magic, n, rows, cols) + bytes(pixels))


def _labels_file(path, labels, magic=0x801, count=None):
    path.write_bytes(struct.pack(">2I", magic, len(labels) if count is None else count) + bytes(labels))


def test_pixel_bytes_scaled_into_unit_range(tmp_path):
    _images_file(tmp_path / "img", 1, 2, 2, [0, 255, 128, 0])
    _labels_file(tmp_path / "lab", [3])
    ds = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=10)
    assert ds.images.shape == (1, 1, 2, 2)
    assert ds.images.ravel().tolist() == [0.0, 1.0, 128 / 255, 0.0]
    assert ds.labels.tolist() == [3]


def test_bad_label_magic(tmp_path):
    _images_file(tmp_path / "img", 1, 2, 2, [0, 1, 2, 3])
    _labels_file(tmp_path / "lab", [0], magic=2050)
    with pytest.raises(BadMagicError, match="bad magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_bad_image_magic(tmp_path):
    _images_file(tmp_path / "img", 1, 2, 2, [0, 1, 2, 3], magic=2049)
    _labels_file(tmp_path / "lab", [0])
    with pytest.raises(BadMagicError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_truncated_body(tmp_path):
    _images_file(tmp_path / "img", 2, 2, 2, [0, 1, 2, 3])
    with pytest.raises(TruncatedFileError):
        read_idx_images(tmp_path / "img")


def test_truncated_header(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">2I", 0x803, 1))
    with pytest.raises(TruncatedFileError):
        read_idx_images(tmp_path / "img")


def test_count_mismatch(tmp_path):
    _images_file(tmp_path / "img", 2, 1, 1, [0, 1])
    _labels_file(tmp_path / "lab", [0, 1, 0])
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_errors_are_distinct():
    kinds = {BadMagicError, TruncatedFileError, CountMismatchError}
    assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_ten_sample_fixture_round_trips_bytewise(tmp_path):
    rng = np.random.default_rng(7)
    pixels = rng.integers(0, 256, size=10 * 5 * 4).tolist()
    labels = rng.integers(0, 10, size=10).tolist()
    _images_file(tmp_path / "img", 10, 5, 4, pixels)
    _labels_file(tmp_path / "lab", labels)
    ds = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=10)
    write_idx(ds, tmp_path / "img2", tmp_path / "lab2")
    assert (tmp_path / "img2").read_bytes() == (tmp_path / "img").read_bytes()
    assert (tmp_path / "lab2").read_bytes() == (tmp_path / "lab").read_bytes()


def test_limit_keeps_prefix(tmp_path):
    _images_file(tmp_path / "img", 3, 1, 1, [0, 51, 102])
    _labels_file(tmp_path / "lab", [0, 1, 2])
    ds = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=3, limit=2)
    assert ds.labels.tolist() == [0, 1]


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], 2)


def test_synth_is_deterministic():
    a, b = synth_blobs(4, 10, 8, seed=3), synth_blobs(4, 10, 8, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert synth_blobs(4, 10, 8, seed=4).images.tobytes() != a.images.tobytes()


def test_synth_balanced_construction():
    ds = synth_blobs(2, 100, 8, seed=0)
    assert len(ds) == 200
    assert np.bincount(ds.labels).tolist() == [100, 100]
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synth_splits_differ_but_share_geometry():
    tr, te = synth_blobs(3, 20, 8, 0), synth_blobs(3, 20, 8, 0, split="test")
    assert tr.images.tobytes() != te.images.tobytes()
    # class means line up across splits
    for c in range(3):
        m_tr = tr.images[tr.labels == c].mean(axis=0)
        m_te = te.images[te.labels == c].mean(axis=0)
        assert np.abs(m_tr - m_te).max() < 0.15


def test_synth_rejects_bad_sizes():
    with pytest.raises(ValueError):
        synth_blobs(0, 5, 8, 0)


def test_small_cnn_learns_blobs_in_five_epochs():
    ds = synth_blobs(10, 100, 12, seed=0)
    net = Network.from_spec(DESK_CNN, INPUT, seed=0)
    train(net, ds, Natural(), TrainConfig(epochs=5, batch_size=64, lr=0.05))
    assert (predict(net, ds.images) == ds.labels).mean() >= 0.95


@given(st.integers(1, 60), st.integers(1, 17), st.integers(0, 5), st.booleans())
def test_batches_cover_a_permutation(n, bs, epoch, shuffle):
    ds = Dataset(np.linspace(0, 1, n).reshape(n, 1, 1, 1), np.zeros(n, dtype=int), 1)
    it = BatchIterator(ds, bs, seed=11, shuffle=shuffle, epoch=epoch)
    batches = list(it)
    assert len(batches) == math.ceil(n / bs) == len(it)
    seen = np.concatenate([x.ravel() for x, _ in batches])
    assert sorted(seen.tolist()) == sorted(ds.images.ravel().tolist())


def test_shuffle_is_pure_function_of_seed_and_epoch():
    ds = synth_blobs(2, 10, 4, 0)
    a = BatchIterator(ds, 4, seed=5)
    b = BatchIterator(ds, 4, seed=5)
    assert np.array_equal(a.order(3), b.order(3))
    assert not np.array_equal(a.order(3), a.order(4))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_normalize_is_idempotent_on_unit_data(vals):
    x = np.array(vals)
    assert np.array_equal(normalize(x), x)
    assert np.array_equal(normalize(normalize(x)), normalize(x))


def test_normalize_maps_into_unit_range():
    out = normalize(np.array([-2.0, 0.0, 6.0]))
    assert out.tolist() == [0.0, 0.25, 1.0]

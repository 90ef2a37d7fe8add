import struct

import numpy as np
import pytest

from ewavit.data import DatasetError, load_dataset, parse_spec, read_idx, synthetic, write_idx


def test_synthetic_contract():
    ds = synthetic(n=1024, classes=10, size=32, seed=7)
    assert len(ds) == 1024
    assert ds.images.shape == (1024, 3, 32, 32)
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_synthetic_is_seeded():
    a, b = synthetic(n=64, size=8, seed=3), synthetic(n=64, size=8, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, synthetic(n=64, size=8, seed=4).images)


def test_epoch_order_repeatable_and_varies_by_epoch():
    ds = synthetic(n=50, size=8, seed=1)
    np.testing.assert_array_equal(ds.epoch_order(2), ds.epoch_order(2))
    assert not np.array_equal(ds.epoch_order(0), ds.epoch_order(1))
    assert sorted(ds.epoch_order(3)) == list(range(50))


def test_iteration_yields_image_label_pairs():
    img, label = next(iter(synthetic(n=10, size=8)))
    assert img.shape == (3, 8, 8) and isinstance(label, int)


def test_batches_cover_everything():
    ds = synthetic(n=23, size=8)
    sizes = [len(y) for _, y in ds.batches(5)]
    assert sizes == [5, 5, 5, 5, 3]


def test_idx_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (6, 4, 4)).astype(np.uint8)
    labels = np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8)
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", labels)
    assert (tmp_path / "x.idx").read_bytes()[:4] == bytes([0, 0, 8, 3])
    np.testing.assert_array_equal(read_idx(tmp_path / "x.idx"), imgs)
    ds = load_dataset("idx:images=x.idx,labels=y.idx", tmp_path)
    assert ds.images.shape == (6, 1, 4, 4) and ds.n_classes == 3
    assert ds.images.max() <= 1.0


def test_idx_errors_name_offsets(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DatasetError, match="byte offset 0"):
        read_idx(bad)
    bad.write_bytes(b"\x00\x00\x07\x01\x00\x00\x00\x01\x00")
    with pytest.raises(DatasetError, match="byte offset 2"):
        read_idx(bad)
    bad.write_bytes(struct.pack(">HBBI", 0, 8, 1, 10) + b"\x00" * 4)
    with pytest.raises(DatasetError, match="byte offset 12"):
        read_idx(bad)


def test_csv_loading_and_errors(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("1,0,0.5,0.5,1\n0,1,1,1,1\n")
    ds = load_dataset("csv:path=d.csv", tmp_path)
    assert ds.images.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(ds.labels, [1, 0])
    f.write_text("1,0,0.5,0.5,1\n0,x,1,1,1\n")
    with pytest.raises(DatasetError, match="byte offset 14"):
        load_dataset("csv:path=d.csv", tmp_path)
    f.write_text("1,0,0.5,0.5,1\n0,1,1\n")
    with pytest.raises(DatasetError, match="byte offset 14"):
        load_dataset("csv:path=d.csv", tmp_path)


def test_spec_errors():
    assert parse_spec("synthetic:n=4,seed=2") == ("synthetic", {"n": "4", "seed": "2"})
    with pytest.raises(DatasetError):
        parse_spec("synthetic:n4")
    with pytest.raises(DatasetError):
        load_dataset("tfrecord:path=x")
    with pytest.raises(DatasetError):
        load_dataset("synthetic:colour=1")

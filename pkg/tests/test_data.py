"""Dataset loading: IDX, CSV, synthetic generator, batching."""
import struct

import numpy as np
import pytest

from adq.data import (Dataset, FormatError, load_csv, load_dataset,
                      load_idx_images, load_idx_labels, load_train_val,
                      synthetic_dataset)

from helpers import rng_for


def write_idx_images(path, images):
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) +
                     images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) +
                     labels.astype(np.uint8).tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = rng_for(1)
    images = rng.integers(0, 256, (6, 5, 5)).astype(np.uint8)
    labels = np.array([0, 1, 2, 0, 1, 2], np.uint8)
    ip, lp = tmp_path / "t-images.idx", tmp_path / "t-labels.idx"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    return ip, lp, images, labels


def test_idx_roundtrip(idx_pair):
    ip, lp, images, labels = idx_pair
    x = load_idx_images(ip)
    y = load_idx_labels(lp)
    assert x.shape == (6, 1, 5, 5)
    assert x.dtype == np.float32
    assert np.array_equal(x[:, 0] * 255, images.astype(np.float32))
    assert np.array_equal(y, labels.astype(np.int64))


def test_idx_bad_magic_names_offset(idx_pair, tmp_path):
    ip, _, images, _ = idx_pair
    bad = tmp_path / "bad-images.idx"
    bad.write_bytes(struct.pack(">IIII", 0x17, 6, 5, 5) + images.tobytes())
    with pytest.raises(FormatError, match="byte 0"):
        load_idx_images(bad)


def test_idx_truncated_names_offsets(idx_pair, tmp_path):
    ip, _, images, _ = idx_pair
    data = ip.read_bytes()
    cut = tmp_path / "cut-images.idx"
    cut.write_bytes(data[:-10])
    with pytest.raises(FormatError, match=f"byte {len(data) - 10}.*{len(data)}"):
        load_idx_images(cut)
    short = tmp_path / "short-images.idx"
    short.write_bytes(data[:9])
    with pytest.raises(FormatError):
        load_idx_images(short)


def test_idx_trailing_garbage_rejected(idx_pair, tmp_path):
    ip, _, _, _ = idx_pair
    fat = tmp_path / "fat-images.idx"
    fat.write_bytes(ip.read_bytes() + b"\x00\x01")
    with pytest.raises(FormatError):
        load_idx_images(fat)


def test_idx_count_mismatch(idx_pair, tmp_path):
    ip, lp, _, _ = idx_pair
    lp2 = tmp_path / "t2-labels.idx"
    write_idx_labels(lp2, np.zeros(4, np.uint8))
    ip2 = tmp_path / "t2-images.idx"
    ip2.write_bytes(ip.read_bytes())
    with pytest.raises(FormatError, match="6.*4|4.*6"):
        load_dataset(str(ip2), "idx")


def test_idx_path_must_contain_images(idx_pair):
    _, lp, _, _ = idx_pair
    with pytest.raises(FormatError, match="images"):
        load_dataset(str(lp), "idx")


def csv_text(rows):
    return "\n".join(",".join(str(v) for v in r) for r in rows) + "\n"


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(csv_text([[1, 0, 128, 255, 64], [0, 10, 20, 30, 40]]))
    ds = load_csv(p)
    assert ds.images.shape == (2, 1, 2, 2)
    assert np.array_equal(ds.labels, [1, 0])
    assert ds.images[0, 0, 0, 1] == np.float32(128 / 255)


def test_csv_field_count_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(csv_text([[1, 0, 128, 255, 64], [0, 10, 20, 30]]))
    with pytest.raises(FormatError, match="line 2"):
        load_csv(p)


def test_csv_non_square(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(csv_text([[1, 0, 128, 255]]))
    with pytest.raises(FormatError, match="square"):
        load_csv(p)


def test_csv_non_numeric(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(csv_text([[1, 0, "x", 255, 64]]))
    with pytest.raises(FormatError, match="line 1"):
        load_csv(p)


def test_csv_pixel_range(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(csv_text([[1, 0, 300, 255, 64]]))
    with pytest.raises(FormatError, match="range"):
        load_csv(p)


def test_synthetic_is_deterministic():
    a = synthetic_dataset(50, 7)
    b = synthetic_dataset(50, 7)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = synthetic_dataset(50, 8)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_shapes_and_range():
    ds = synthetic_dataset(40, 0)
    assert ds.images.shape == (40, 1, 17, 17)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.input_shape == (1, 17, 17)
    assert ds.n_classes == 10


def test_synthetic_label_balance():
    ds = synthetic_dataset(500, 3)
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.min() == counts.max() == 50


def test_batches_cover_and_shuffle():
    ds = synthetic_dataset(100, 1)
    plain = [y for _, y in ds.batches(32)]
    assert [len(y) for y in plain] == [32, 32, 32, 4]
    assert np.array_equal(np.concatenate(plain), ds.labels)

    r1 = [y for _, y in ds.batches(32, rng=rng_for(9))]
    r2 = [y for _, y in ds.batches(32, rng=rng_for(9))]
    for a, b in zip(r1, r2):
        assert np.array_equal(a, b)
    assert sorted(np.concatenate(r1)) == sorted(ds.labels)
    assert not np.array_equal(np.concatenate(r1), ds.labels)


def test_dataset_validation():
    with pytest.raises(FormatError):
        Dataset(np.zeros((4, 5, 5), np.float32), np.zeros(4, np.int64))
    with pytest.raises(FormatError):
        Dataset(np.zeros((4, 1, 5, 5), np.float32), np.zeros(3, np.int64))
    # dtypes are coerced, not rejected
    ds = Dataset(np.zeros((4, 1, 5, 5), np.float64), np.zeros(4, np.int32))
    assert ds.images.dtype == np.float32
    assert ds.labels.dtype == np.int64


def test_load_train_val_synthetic_split():
    train, val = load_train_val("", "synthetic", seed=4)
    assert len(train.labels) == 5000
    assert len(val.labels) == 1000
    assert not np.array_equal(train.images[:10], val.images[:10])
    t2, v2 = load_train_val("", "synthetic", seed=4)
    assert np.array_equal(train.images, t2.images)
    assert np.array_equal(val.images, v2.images)


def test_load_train_val_file_split(tmp_path):
    rng = rng_for(2)
    images = rng.integers(0, 256, (12, 5, 5)).astype(np.uint8)
    labels = (np.arange(12) % 3).astype(np.uint8)
    write_idx_images(tmp_path / "m-images.idx", images)
    write_idx_labels(tmp_path / "m-labels.idx", labels)
    train, val = load_train_val(str(tmp_path / "m-images.idx"), "idx", seed=0)
    assert len(train.labels) == 10
    assert len(val.labels) == 2
    assert np.array_equal(np.concatenate([train.labels, val.labels]),
                          labels.astype(np.int64))

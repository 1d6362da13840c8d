"""Dataset plumbing: IDX and CSV parsers plus a synthetic blob generator.

All loaders return a Dataset of float32 images in [0,1] shaped [N,C,H,W]
and int64 labels. Format errors name the byte offset (IDX) or line (CSV).
"""
import csv
import math
import struct

import numpy as np


class FormatError(ValueError):
    pass


SYNTH_TRAIN = 5000
SYNTH_VAL = 1000
SYNTH_CLASSES = 10
SYNTH_SIZE = 17


class Dataset:
    def __init__(self, images, labels):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise FormatError(f"images must be [N,C,H,W], got shape {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise FormatError("labels must be a vector matching the image count")
        self.images = images
        self.labels = labels

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def batches(self, batch_size, rng=None):
        """Yield (images, labels) slices; shuffled when an rng is given."""
        n = len(self)
        order = np.arange(n) if rng is None else rng.permutation(n)
        for i in range(0, n, batch_size):
            sel = order[i:i + batch_size]
            yield self.images[sel], self.labels[sel]


def _read_header(raw, path, want_magic, ndim):
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: file ends at byte {len(raw)}, header needs "
                          f"{4 + 4 * ndim}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != want_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, "
                          f"expected 0x{want_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    return dims, 4 + 4 * ndim


def load_idx_images(path):
    """Parse an IDX image file (magic 0x00000803) into float32 [N,1,H,W]."""
    with open(path, "rb") as f:
        raw = f.read()
    (n, h, w), off = _read_header(raw, path, 0x00000803, 3)
    need = off + n * h * w
    if len(raw) != need:
        raise FormatError(f"{path}: file ends at byte {len(raw)}, expected {need}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=off)
    return (pix.reshape(n, 1, h, w).astype(np.float32) / 255.0)


def load_idx_labels(path):
    """Parse an IDX label file (magic 0x00000801) into int64 [N]."""
    with open(path, "rb") as f:
        raw = f.read()
    (n,), off = _read_header(raw, path, 0x00000801, 1)
    need = off + n
    if len(raw) != need:
        raise FormatError(f"{path}: file ends at byte {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(np.int64)


def load_csv(path):
    """CSV with one sample per row: label first, then H*W pixels in [0,255]."""
    rows = []
    labels = []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                side = math.isqrt(width - 1)
                if width < 2 or side * side != width - 1:
                    raise FormatError(f"{path}: line {lineno}: {width - 1} pixel "
                                      f"columns is not a square image")
            if len(row) != width:
                raise FormatError(f"{path}: line {lineno}: expected {width} "
                                  f"fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric field") from None
            if not all(0 <= v <= 255 for v in vals[1:]):
                raise FormatError(f"{path}: line {lineno}: pixel outside [0,255]")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    side = math.isqrt(len(rows[0]))
    images = np.array(rows, dtype=np.float32).reshape(-1, 1, side, side) / 255.0
    return Dataset(images, np.array(labels, dtype=np.int64))


def synthetic_dataset(n, seed, n_classes=SYNTH_CLASSES, size=SYNTH_SIZE):
    """Gaussian blobs on a ring, one arc position per class, plus pixel noise.

    Balanced labels, fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes).astype(np.int64)
    ang = 2.0 * np.pi * labels / n_classes
    radius = 5.5
    c = size // 2
    cy = c + radius * np.sin(ang) + rng.normal(0.0, 0.7, n)
    cx = c + radius * np.cos(ang) + rng.normal(0.0, 0.7, n)
    sig = 1.8 + rng.uniform(-0.25, 0.25, n)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = ((yy[None] - cy[:, None, None]) ** 2
          + (xx[None] - cx[:, None, None]) ** 2)
    img = np.exp(-d2 / (2.0 * sig[:, None, None] ** 2))
    img = img + rng.normal(0.0, 0.05, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[:, None]
    return Dataset(img, labels)


def _split_tail(ds, val_fraction=1.0 / 6.0):
    n_val = max(1, int(len(ds) * val_fraction))
    n_train = len(ds) - n_val
    train = Dataset(ds.images[:n_train], ds.labels[:n_train])
    val = Dataset(ds.images[n_train:], ds.labels[n_train:])
    return train, val


def load_dataset(path, fmt):
    """Load one file. For idx, `path` is the images file; the labels file is
    found by the images->labels naming convention."""
    if fmt == "idx":
        if "images" not in path:
            raise FormatError(f"{path}: idx path must be the images file "
                              f"('images' in its name; labels found by "
                              f"replacing it with 'labels')")
        images = load_idx_images(path)
        labels = load_idx_labels(path.replace("images", "labels"))
        if len(images) != len(labels):
            raise FormatError(f"{path}: {len(images)} images but "
                              f"{len(labels)} labels")
        return Dataset(images, labels)
    if fmt == "csv":
        return load_csv(path)
    raise FormatError(f"unknown dataset format {fmt!r}")


def load_train_val(path, fmt, seed):
    """Train/val pair: synthetic draws disjoint seeded sets, files split 5:1."""
    if fmt == "synthetic":
        s_train, s_val = np.random.SeedSequence(seed).spawn(2)
        return (synthetic_dataset(SYNTH_TRAIN, s_train),
                synthetic_dataset(SYNTH_VAL, s_val))
    return _split_tail(load_dataset(path, fmt))

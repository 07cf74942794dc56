"""Datasets: the synthetic spiral task plus CSV and IDX readers."""
import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, FormatError


@dataclass
class Dataset:
    inputs: np.ndarray   # (N, input_dim) float64
    labels: np.ndarray   # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise DatasetError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def batches(self, batch_size, rng):
        """Shuffled mini-batches covering every example once."""
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.labels[idx]

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split or self.split)


def gen_spiral(seed, n_points, num_classes=3, noise=0.0, turns=1.0, split="train"):
    """Interleaved 2-D spiral arms, one class per arm.

    Arm ``j`` follows radius r in [0.1, 1] at angle 2*pi*(j/K + turns*r);
    ``noise`` is the std of isotropic Gaussian jitter added to each point.
    Points are split as evenly as possible across arms.
    """
    if num_classes < 2:
        raise DatasetError("a spiral needs at least 2 arms")
    rng = np.random.default_rng(seed)
    counts = [n_points // num_classes + (j < n_points % num_classes) for j in range(num_classes)]
    xs, ys = [], []
    for j, m in enumerate(counts):
        r = rng.uniform(0.1, 1.0, m)
        theta = 2 * np.pi * (j / num_classes + turns * r)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if noise > 0:
            pts += rng.normal(0.0, noise, pts.shape)
        xs.append(pts)
        ys.append(np.full(m, j))
    x = np.concatenate(xs) if xs else np.zeros((0, 2))
    y = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], num_classes, split)


def spiral_splits(seed, n_train, n_val, num_classes=3, noise=0.0, turns=1.0):
    full = gen_spiral(seed, n_train + n_val, num_classes, noise, turns)
    return (full.subset(np.arange(n_train), "train"),
            full.subset(np.arange(n_train, n_train + n_val), "val"))


def minmax_normalize(x):
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


def load_csv(path, label_column=-1, header=None, num_classes=None, normalize=True, split="train"):
    """Read a numeric CSV with one integer label column.

    ``header=None`` auto-detects a header row (first row not fully numeric).
    Features are min-max scaled to [0, 1] per column.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(ln, r) for ln, r in enumerate(rows, start=1) if any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    if header is None:
        header = not _numeric_row(rows[0][1])
    if header:
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"{path}: empty dataset (header only)")
    width = len(rows[0][1])
    if width < 2:
        raise DatasetError(f"{path}: need at least one feature and a label column")
    feats, labels = [], []
    for ln, row in rows:
        if len(row) != width:
            raise DatasetError(f"{path}:{ln}: expected {width} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise DatasetError(f"{path}:{ln}: non-numeric field") from None
        lab = vals.pop(label_column)
        if lab != int(lab) or lab < 0:
            raise DatasetError(f"{path}:{ln}: label {lab} is not a non-negative integer")
        if num_classes is not None and lab >= num_classes:
            raise DatasetError(f"{path}:{ln}: label {int(lab)} outside [0, {num_classes})")
        feats.append(vals)
        labels.append(int(lab))
    x = np.array(feats, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(minmax_normalize(x) if normalize else x, y, max(k, 2), split)


def _numeric_row(row):
    try:
        [float(c) for c in row]
        return True
    except ValueError:
        return False


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Parse an IDX file (the MNIST container format) into an array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code not in _IDX_TYPES or ndim < 1:
        raise FormatError(f"{path}: bad IDX magic number {raw[:4].hex()}")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    dt = np.dtype(_IDX_TYPES[dtype_code])
    count = int(np.prod(dims))
    if len(raw) - hdr != count * dt.itemsize:
        raise FormatError(f"{path}: payload holds {len(raw) - hdr} bytes, header implies {count * dt.itemsize}")
    return np.frombuffer(raw, dtype=dt, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(f"{labels_path}: {labels.shape} labels for {images.shape[0]} images")
    if images.shape[0] == 0:
        raise DatasetError(f"{images_path}: empty dataset")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    else:
        x = minmax_normalize(x)
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, max(k, 2), split)

"""Datasets: IDX files, synthetic blobs, frozen task nets, analysis sampling."""

import struct
from dataclasses import dataclass, replace

import numpy as np

from tcx import nn

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray            # (n, d) float64
    labels: np.ndarray              # (n,) int class indices or (n, k) targets
    split: str = "train"
    norm_mean: np.ndarray = None
    norm_std: np.ndarray = None

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def select(self, idx):
        return replace(self, features=self.features[idx],
                       labels=self.labels[idx])


def normalize(ds):
    """Per-dimension standardization; records (mean, std) for inversion."""
    if ds.norm_mean is not None:
        raise DataError("dataset already normalized")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std = np.where(std == 0, 1.0, std)
    return replace(ds, features=(ds.features - mean) / std,
                   norm_mean=mean, norm_std=std)


def denormalize(ds):
    if ds.norm_mean is None:
        raise DataError("dataset is not normalized")
    return replace(ds, features=ds.features * ds.norm_std + ds.norm_mean,
                   norm_mean=None, norm_std=None)


def _read_idx(path, expect_magic, expect_dims):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 * (1 + expect_dims):
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expect_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}")
    dims = struct.unpack_from(f">{expect_dims}I", buf, 4)
    count = int(np.prod(dims))
    off = 4 + 4 * expect_dims
    if len(buf) - off != count:
        raise DataError(f"{path}: expected {count} bytes, found {len(buf) - off}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=off)
    return dims, data


def load_idx(images_path, labels_path, split="train"):
    """MNIST-style IDX pair; pixels scaled to [0,1]."""
    (n, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DataError(f"image count {n} != label count {n_labels}")
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(features=features, labels=labels.astype(np.int64),
                   split=split)


def save_idx(ds, images_path, labels_path):
    """Quantize features to bytes (min-max over the dataset) and write IDX."""
    feats = ds.features
    lo, hi = feats.min(), feats.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.round((feats - lo) * scale).astype(np.uint8)
    n, d = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, 1, d))
        fh.write(pixels.tobytes())
    labels = np.asarray(ds.labels)
    if labels.ndim != 1:
        raise DataError("only class-label datasets can be exported to IDX")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


def to_grayscale(rgb):
    """Channel-major (n, 3*hw) -> (n, hw) by arithmetic channel mean."""
    rgb = np.asarray(rgb, dtype=np.float64)
    n, d = rgb.shape
    if d % 3 != 0:
        raise DataError(f"feature dim {d} not divisible by 3")
    return rgb.reshape(n, 3, d // 3).mean(axis=1)


def make_synthetic_classification(seed, n, d, n_classes, separation):
    """Balanced Gaussian blobs: centers ~ separation * N(0, I), unit noise."""
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    if n < n_classes:
        raise DataError(f"n={n} smaller than class count {n_classes}")
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((n_classes, d))
    labels = np.arange(n) % n_classes
    features = centers[labels] + rng.standard_normal((n, d))
    perm = rng.permutation(n)
    return Dataset(features=features[perm], labels=labels[perm].astype(np.int64))


def make_synthetic_regression_images(seed, n, hw, channels=3):
    """Random pixel images in [0,1], channel-major; distillation inputs."""
    rng = np.random.default_rng(seed)
    return rng.random((n, channels * hw))


def make_task_mlp(n_relu, width, seed, in_dim=None, out_dim=None):
    """Frozen random net with n_relu ReLU layers between constant-width FCs."""
    if n_relu < 0:
        raise DataError("n_relu must be >= 0")
    in_dim = width if in_dim is None else in_dim
    out_dim = width if out_dim is None else out_dim
    spec = [nn.dense(in_dim, width if n_relu else out_dim)]
    for i in range(n_relu):
        spec.append(nn.relu())
        spec.append(nn.dense(width, width if i < n_relu - 1 else out_dim))
    return nn.init_network(spec, seed, frozen=True)


def subsample_analysis_set(ds, k=2000, seed=0):
    """Fixed analysis subset, drawn once without replacement.

    Returns (subset, indices); asking for more than n takes everything (the
    caller sees that via the index length).
    """
    if k <= 0:
        raise DataError("analysis set size must be positive")
    if k >= ds.n:
        idx = np.arange(ds.n)
    else:
        rng = np.random.default_rng(seed)
        idx = rng.choice(ds.n, size=k, replace=False)
    return ds.select(idx), idx

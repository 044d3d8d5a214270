"""Dataset ingestion and synthesis: IDX loading, stratified subsets, rotated
digits, the sign-symmetric 1-D toy, and one-hot regression targets.

Digit experiments at desk scale use the 8x8 scikit-learn digits corpus
(bundled offline) upsampled to 16x16, standing in for full MNIST.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import transforms as tf
from .rand import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray            # (N,H,W,C) images or (N,D) vectors
    targets: np.ndarray           # integer labels or real values
    name: str = "dataset"
    split: str = "train"
    seed: int | None = None
    n_classes: int | None = None
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs/targets length mismatch")
        if self.n_classes is not None and np.issubdtype(self.targets.dtype, np.integer):
            if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
                raise ValueError("labels outside class count")

    def __len__(self):
        return len(self.inputs)

    def manifest(self):
        return {
            "name": self.name,
            "n": len(self),
            "classes": self.n_classes,
            "seed": self.seed,
            "provenance": self.provenance,
        }


def load_idx(images_path, labels_path) -> Dataset:
    """Load the standard big-endian IDX image/label pair, pixels to [0,1]."""
    with open(images_path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4 or struct.unpack(">I", head)[0] != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad IDX image magic in {images_path}")
        n, h, w = struct.unpack(">III", fh.read(12))
        payload = fh.read(n * h * w)
        if len(payload) != n * h * w:
            raise ValueError("truncated IDX image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w, 1)
    with open(labels_path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4 or struct.unpack(">I", head)[0] != IDX_LABELS_MAGIC:
            raise ValueError(f"bad IDX label magic in {labels_path}")
        (nl,) = struct.unpack(">I", fh.read(4))
        if nl != n:
            raise ValueError(f"image/label count mismatch: {n} vs {nl}")
        payload = fh.read(nl)
        if len(payload) != nl:
            raise ValueError("truncated IDX label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    return Dataset(images.astype(np.float64) / 255.0, labels,
                   name="idx", n_classes=int(labels.max()) + 1,
                   provenance=[{"op": "load_idx", "images": str(images_path)}])


def load_digits16(size=16) -> Dataset:
    """Bundled 8x8 digits corpus, bilinearly upsampled (desk-scale MNIST)."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images / 16.0  # (N,8,8) in [0,1]
    n = images.shape[0]
    images = images[..., None]
    if size != 8:
        images = _resize_bilinear(images, size, size)
    return Dataset(images, raw.target.astype(np.int64), name=f"digits{size}",
                   n_classes=10, provenance=[{"op": "load_digits", "size": size}])


def _resize_bilinear(images, h_out, w_out):
    n, h, w, c = images.shape
    rows = np.linspace(0, h - 1, h_out)
    cols = np.linspace(0, w - 1, w_out)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (rows - r0)[:, None, None]
    wc = (cols - c0)[None, :, None]
    out = (
        images[:, r0][:, :, c0] * (1 - wr) * (1 - wc)
        + images[:, r0][:, :, c1] * (1 - wr) * wc
        + images[:, r1][:, :, c0] * wr * (1 - wc)
        + images[:, r1][:, :, c1] * wr * wc
    )
    return out


def stratified_subset(ds: Dataset, n, seed) -> Dataset:
    """Subset with class counts differing by at most 1; deterministic in seed."""
    if n > len(ds):
        raise ValueError(f"requested {n} > dataset size {len(ds)}")
    labels = np.asarray(ds.targets)
    classes = np.unique(labels)
    rng = substream(seed, "stratify")
    base, extra = divmod(n, len(classes))
    order = rng.permutation(len(classes))
    counts = {int(classes[i]): base + (1 if rank < extra else 0)
              for rank, i in enumerate(order)}
    picked = []
    for cls in classes:
        idx = np.where(labels == cls)[0]
        take = counts[int(cls)]
        if take > len(idx):
            raise ValueError(f"class {cls} has only {len(idx)} points, need {take}")
        picked.append(rng.choice(idx, size=take, replace=False))
    picked = np.sort(np.concatenate(picked))
    return Dataset(ds.inputs[picked].copy(), ds.targets[picked].copy(),
                   name=f"{ds.name}-sub{n}", split=ds.split, seed=seed,
                   n_classes=ds.n_classes,
                   provenance=ds.provenance + [{"op": "stratified_subset",
                                                "n": n, "seed": seed}])


def make_rotated(ds: Dataset, seed, max_angle=2 * np.pi) -> Dataset:
    """Rotate every image by an independent uniform angle in [0, max_angle).

    Uses the library's own differentiable warp so data generation and orbit
    sampling interpolate identically. Drawn angles are stored in provenance
    for test oracles.
    """
    rng = substream(seed, "rotate")
    images = np.asarray(ds.inputs, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError("make_rotated needs an image dataset")
    n = images.shape[0]
    angles = rng.uniform(0.0, max_angle, size=n)
    nu = np.tile(tf.NEUTRAL, (n, 1))
    nu[:, 0] = angles
    mats = tf.affine_matrix(nu).value
    rotated = tf.warp(images, mats).value
    return Dataset(rotated, ds.targets.copy(), name=f"{ds.name}-rot",
                   split=ds.split, seed=seed, n_classes=ds.n_classes,
                   provenance=ds.provenance + [{"op": "make_rotated",
                                                "seed": seed,
                                                "angles": angles.tolist()}])


def make_sign_symmetric_toy(n_train=12, n_test=50, noise_sd=0.1, seed=0):
    """1-D regression toy with targets symmetric around x=0.

    y = g0(|x|) + noise for a fixed smooth g0; test inputs cover both signs.
    Returns (train, test) Datasets.
    """
    if n_train < 2 or n_test < 2:
        raise ValueError("need at least 2 points per split")
    rng = substream(seed, "toy")

    def g0(a):
        return np.sin(2.0 * a) + 0.5 * a

    x_train = rng.uniform(-2.0, 2.0, size=(n_train, 1))
    y_train = g0(np.abs(x_train)) + noise_sd * rng.standard_normal((n_train, 1))
    x_test = np.linspace(-2.0, 2.0, n_test)[:, None]
    y_test = g0(np.abs(x_test))
    train = Dataset(x_train, y_train, name="sign-toy", split="train", seed=seed,
                    provenance=[{"op": "make_sign_symmetric_toy", "seed": seed,
                                 "noise_sd": noise_sd}])
    test = Dataset(x_test, y_test, name="sign-toy", split="test", seed=seed)
    return train, test


def one_hot_targets(ds: Dataset, n_classes) -> Dataset:
    """Integer labels -> {0,1}^C regression targets, exactly one 1 per row."""
    labels = np.asarray(ds.targets)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range for one-hot encoding")
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    return Dataset(ds.inputs, onehot, name=f"{ds.name}-onehot", split=ds.split,
                   seed=ds.seed, provenance=ds.provenance + [{"op": "one_hot",
                                                              "C": n_classes}])


def train_val_split(ds: Dataset, val_fraction=0.25, seed=0):
    rng = substream(seed, "valsplit")
    n = len(ds)
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    mk = lambda idx, split: Dataset(
        ds.inputs[idx].copy(), ds.targets[idx].copy(), name=ds.name,
        split=split, seed=seed, n_classes=ds.n_classes,
        provenance=ds.provenance + [{"op": "train_val_split", "seed": seed,
                                     "split": split}])
    return mk(train_idx, "train"), mk(val_idx, "val")

"""Datasets: IDX files, synthetic blobs, and evaluation-subset selection."""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import nn

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_U8 = 0x08

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class InsufficientExamplesError(ValueError):
    def __init__(self, qualifying, requested):
        super().__init__(
            f"only {qualifying} examples are correctly classified by every model; "
            f"{requested} requested")
        self.qualifying = qualifying
        self.requested = requested


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    provenance: str = ""

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def empty(self):
        return len(self.labels) == 0

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       provenance or self.provenance)


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_ndim=None):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _open(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    ndim = magic & 0xFF
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != _U8 or ndim == 0:
        raise IdxMagicError(f"{path}: wrong magic 0x{magic:08x}")
    if expect_ndim is not None and not expect_ndim(ndim):
        raise IdxMagicError(f"{path}: wrong magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(
            f"{path}: payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array):
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = (_U8 << 8) | a.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


def load_idx(images_path, labels_path, num_classes=10):
    """Load an image/label IDX pair, scaling pixels by 1/255.

    Three-dimensional image files (N, H, W) gain a channel axis so that each
    example is (1, H, W).
    """
    pixels = read_idx(images_path, expect_ndim=lambda d: d >= 2)
    labels = read_idx(labels_path, expect_ndim=lambda d: d == 1)
    if len(pixels) != len(labels):
        raise IdxCountMismatchError(
            f"{len(pixels)} images in {images_path} but {len(labels)} labels in {labels_path}")
    images = pixels.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[:, None]
    if len(labels):
        num_classes = max(num_classes, int(labels.max()) + 1)
    return Dataset(images, labels.astype(np.int64), num_classes, provenance=str(images_path))


def to_bytes(images):
    """Quantize [0, 1] pixels to uint8 (round to nearest)."""
    return np.rint(np.clip(np.asarray(images), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_idx(ds_or_images, images_path, labels_path=None, labels=None):
    if isinstance(ds_or_images, Dataset):
        images, labels = ds_or_images.images, ds_or_images.labels
    else:
        images = ds_or_images
    pixels = to_bytes(images)
    if pixels.ndim == 4 and pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    write_idx(images_path, pixels)
    if labels_path is not None:
        write_idx(labels_path, np.asarray(labels, dtype=np.uint8))


def load_split(data_dir, split="test"):
    """Load the ``train`` or ``test`` split of an MNIST-style directory."""
    names = TRAIN_FILES if split == "train" else TEST_FILES
    paths = []
    for name in names:
        for candidate in (name, name + ".gz"):
            p = os.path.join(data_dir, candidate)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise FileNotFoundError(f"{data_dir}: missing {name}")
    return load_idx(*paths)


# ---------------------------------------------------------------------------
# generated data


def synth_dataset(num_classes, per_class, dim, separation, seed, noise=0.05):
    """Gaussian blobs in ``[0, 1]^dim``.

    Class centres sit on orthogonal directions around 0.5, pairwise
    ``separation * noise`` apart; samples get isotropic noise of std
    ``noise`` and are clipped to the unit box.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((dim, max(num_classes, 1)))
    if num_classes <= dim:
        basis, _ = np.linalg.qr(basis)
    else:
        basis /= np.linalg.norm(basis, axis=0)
    centers = 0.5 + (separation * noise / np.sqrt(2.0)) * basis[:, :num_classes].T
    labels = np.repeat(np.arange(num_classes), per_class)
    images = centers[labels] + noise * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    ds = Dataset(np.clip(images[order], 0.0, 1.0), labels[order], num_classes,
                 provenance=f"synth(num_classes={num_classes}, per_class={per_class}, "
                            f"dim={dim}, separation={separation}, seed={seed})")
    if ds.empty:
        log.warning("synth_dataset produced an empty dataset (per_class=%d)", per_class)
    return ds


def digits28(train_size=1000, seed=0):
    """Handwritten digits from scikit-learn in a 28x28 MNIST-style layout.

    Each 8x8 scan is resampled (bilinear) into a 20x20 box centred in a 28x28
    frame, quantized to bytes, and split into train/test with a fixed
    permutation.  Returns ``(train, test)``.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    small = raw.images / 16.0
    frames = np.zeros((len(small), 28, 28))
    for i, im in enumerate(small):
        frames[i, 4:24, 4:24] = np.clip(zoom(im, 20 / 8, order=1), 0.0, 1.0)
    images = to_bytes(frames).astype(np.float64)[:, None] / 255.0
    labels = raw.target.astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(labels))
    tr, te = perm[:train_size], perm[train_size:]
    return (Dataset(images[tr], labels[tr], 10, "sklearn-digits28:train"),
            Dataset(images[te], labels[te], 10, "sklearn-digits28:test"))


def write_mnist_dir(out_dir, train, test):
    os.makedirs(out_dir, exist_ok=True)
    for ds, (img, lab) in ((train, TRAIN_FILES), (test, TEST_FILES)):
        save_idx(ds, os.path.join(out_dir, img), os.path.join(out_dir, lab))


# ---------------------------------------------------------------------------
# evaluation subset


def correctly_classified_mask(models, ds):
    mask = np.ones(len(ds), dtype=bool)
    for m in models:
        mask &= nn.predict_batched(m, ds.images) == ds.labels
    return mask


def select_correctly_classified(models, ds, n, seed):
    """Seeded uniform sample of ``n`` examples every model gets right."""
    if n < 1:
        raise ValueError("n must be at least 1")
    qualifying = np.flatnonzero(correctly_classified_mask(models, ds))
    if len(qualifying) < n:
        raise InsufficientExamplesError(len(qualifying), n)
    chosen = np.random.default_rng(seed).choice(qualifying, size=n, replace=False)
    names = ",".join(getattr(m, "name", "model") for m in models)
    return ds.subset(chosen, provenance=f"{ds.provenance}|correct[{names}] n={n} seed={seed}")

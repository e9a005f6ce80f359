"""Datasets: IDX and CIFAR-10 binary parsers, the bundled MNIST subset, synthetic sets."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ContractError, ParseError

logger = logging.getLogger(__name__)


@dataclass
class LabeledImageSet:
    """Images ``(N, C, H, W)`` with values in [0, 1] and integer labels ``< class_count``."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "LabeledImageSet":
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index],
                       split=split or self.split)

    def by_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


# -- IDX -------------------------------------------------------------------------------------
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    """Parse one IDX file: two zero bytes, a type code, a rank, big-endian u32 extents, data."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for an IDX header ({len(raw)} bytes)", 0)
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError(f"{path}: bad IDX magic {raw[:4].hex()}", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"{path}: unknown IDX element type 0x{code:02x}", 2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: header needs {header} bytes, file has {len(raw)}", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    key = array.dtype.newbyteorder("=")
    if key not in _IDX_CODES:
        raise ContractError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, split: str = "all", class_count: int = 10) -> LabeledImageSet:
    """MNIST-style image/label file pair; pixels are scaled from bytes to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ParseError(f"{images_path}: expected unsigned-byte images of rank 3, got {images.dtype} rank {images.ndim}", 2)
    if labels.ndim != 1:
        raise ParseError(f"{labels_path}: expected a rank-1 label file, got rank {labels.ndim}", 3)
    if len(images) != len(labels):
        raise ParseError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels", 4)
    if len(labels) and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise ParseError(f"{labels_path}: label {labels[bad]} >= {class_count}", 8 + bad)
    return LabeledImageSet(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64),
                           class_count, split)


def save_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Write a single-channel set as an IDX pair (pixels quantised to bytes)."""
    if dataset.images.shape[1] != 1:
        raise ContractError("IDX image files hold single-channel images")
    write_idx(images_path, _to_bytes(dataset.images[:, 0]))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _to_bytes(images) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


# -- CIFAR-10 binary ---------------------------------------------------------------------------------
CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path, split: str = "all") -> LabeledImageSet:
    """A CIFAR-10 binary batch: records of one label byte and 3072 pixel bytes (R, G, B planes)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise ParseError(
            f"{path}: length {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record size",
            whole * CIFAR_RECORD)
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if (labels > 9).any():
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"{path}: label byte {labels[bad]} > 9 in record {bad}", bad * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images, labels.astype(np.int64), 10, split)


def save_cifar_binary(dataset: LabeledImageSet, path) -> None:
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ContractError(f"CIFAR records hold 3x32x32 images, got {dataset.images.shape[1:]}")
    body = _to_bytes(dataset.images).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], body], axis=1)
    records.tofile(path)


# -- bundled MNIST ------------------------------------------------------------------------------------
def mnist_bundled() -> LabeledImageSet:
    """The 5000-digit MNIST sample (500 per class) that ships with ``mlxtend``."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    return LabeledImageSet(X.reshape(-1, 1, 28, 28) / 255.0, y.astype(np.int64), 10)


def mnist_subset(classes=(0, 1, 2), per_class: int | None = None, source: LabeledImageSet | None = None,
                 ) -> LabeledImageSet:
    """Images of ``classes`` relabelled to ``0 .. len(classes)-1``, at most ``per_class`` each."""
    source = source if source is not None else mnist_bundled()
    keep = []
    for c in classes:
        idx = source.by_class(c)
        keep.append(idx if per_class is None else idx[:per_class])
    keep = np.sort(np.concatenate(keep))
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in source.labels[keep]], dtype=np.int64)
    return LabeledImageSet(source.images[keep], labels, len(classes), source.split)


def split_train_val(dataset: LabeledImageSet, val_fraction: float = 0.2, salt: str = "coda-split"):
    """Deterministic split from a salted hash of each image's index."""
    buckets = np.array([
        int.from_bytes(hashlib.sha256(f"{salt}:{i}".encode()).digest()[:8], "little") % 10_000
        for i in range(len(dataset))
    ])
    val = buckets < int(round(val_fraction * 10_000))
    return dataset.subset(np.flatnonzero(~val), "train"), dataset.subset(np.flatnonzero(val), "val")


# -- noisy templates --------------------------------------------------------------------------------------
@dataclass
class NoisyTemplateSet:
    templates: np.ndarray
    samples: np.ndarray
    sigma: float
    template_index: np.ndarray


def make_noisy_templates(templates, n: int, sigma: float, seed: int = 0, clip: bool = True) -> NoisyTemplateSet:
    """``n`` copies of the templates (cycled) plus zero-mean Gaussian noise.

    With ``clip=True`` samples are clipped to [0, 1]; clipping shifts the noise
    mean away from zero, so the eigenvector demo disables it.
    """
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    templates = np.asarray(templates, dtype=np.float64)
    flat = templates.reshape(len(templates), -1)
    which = np.arange(n) % len(flat)
    rng = np.random.default_rng(seed)
    samples = flat[which] + rng.normal(0.0, sigma, size=(n, flat.shape[1])) if sigma > 0 else flat[which].copy()
    if clip:
        samples = np.clip(samples, 0.0, 1.0)
    return NoisyTemplateSet(templates, samples, float(sigma), which)


# -- confidence filtering ------------------------------------------------------------------------------------
def subset_by_confidence(dataset: LabeledImageSet, net, per_class: int) -> LabeledImageSet:
    """Per class, the ``per_class`` images with the highest ground-truth logit (most confident first)."""
    logits = net.predict(np.asarray(dataset.images, dtype=tn.get_dtype()))
    score = logits[np.arange(len(dataset)), dataset.labels]
    keep = []
    for c in range(dataset.class_count):
        idx = dataset.by_class(c)
        if len(idx) == 0:
            continue
        if len(idx) < per_class:
            logger.warning("class %d has only %d images (< %d); taking all", c, len(idx), per_class)
        order = idx[np.argsort(-score[idx], kind="stable")]
        keep.append(order[:per_class])
    keep = np.concatenate(keep) if keep else np.array([], dtype=np.int64)
    return dataset.subset(keep)

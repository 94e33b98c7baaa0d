import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.models import DatasetSpec
from app.storage import atomic_write_bytes

logger = logging.getLogger(__name__)

# IDX type codes (third header byte)
IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
IMAGES_MAGIC = 0x00000803  # ubyte, rank 3
LABELS_MAGIC = 0x00000801  # ubyte, rank 1
FLOAT_INPUTS_MAGIC = 0x00000E02  # float64, rank 2 (dataset cache)

_IDX_ITEM = {IDX_UBYTE: np.dtype(">u1"), IDX_FLOAT64: np.dtype(">f8")}


class DatasetError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # [N, d] in [0, 1]
    labels: np.ndarray  # [N] in [0, L)
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DatasetError(f"inputs must be a non-empty [N, d] array, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DatasetError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise DatasetError("inputs must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, index: np.ndarray, split_tag: str = None) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.num_classes,
                       split_tag or self.split_tag)


def moons_affine(noise_sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fixed affine map taking raw two-moons coordinates into the unit square.

    Returns:
        (low, span) such that scaled = (raw - low) / span
    """
    margin = 3.0 * noise_sigma
    low = np.array([-1.0 - margin, -0.5 - margin])
    high = np.array([2.0 + margin, 1.0 + margin])
    return low, high - low


def gen_two_moons(n: int, noise_sigma: float, seed: int) -> Dataset:
    """
    Two interleaved half circles with Gaussian noise, rescaled into [0, 1]^2.

    Class 0 is the upper arc (cos t, sin t), class 1 the lower arc
    (1 - cos t, 0.5 - sin t), n/2 points each.
    """
    if n < 2 or n % 2:
        raise DatasetError(f"two moons needs an even n >= 2, got {n}")
    if noise_sigma < 0:
        raise DatasetError(f"noise_sigma must be non-negative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    raw = np.concatenate([upper, lower])
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    if noise_sigma > 0:
        raw = raw + rng.normal(0.0, noise_sigma, size=raw.shape)
    low, span = moons_affine(noise_sigma)
    inputs = np.clip((raw - low) / span, 0.0, 1.0)
    order = rng.permutation(n)
    logger.info(f"Generated two moons: n={n}, noise={noise_sigma}, seed={seed}")
    return Dataset(inputs[order], labels[order], num_classes=2)


def gen_gaussian_blobs(n: int, L: int, centers, sigma: float, seed: int) -> Dataset:
    """Equal-sized isotropic Gaussian clusters around ``centers``, clipped to [0, 1]^d."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] != L:
        raise DatasetError(f"expected {L} centers, got array of shape {centers.shape}")
    if len(np.unique(centers, axis=0)) != L:
        raise DatasetError("blob centers must be distinct")
    if n % L:
        raise DatasetError(f"n={n} does not split evenly across {L} classes")
    if sigma < 0:
        raise DatasetError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    per_class = n // L
    labels = np.repeat(np.arange(L), per_class)
    inputs = centers[labels] + sigma * rng.standard_normal((n, centers.shape[1]))
    inputs = np.clip(inputs, 0.0, 1.0)
    order = rng.permutation(n)
    logger.info(f"Generated {L} gaussian blobs: n={n}, sigma={sigma}, seed={seed}")
    return Dataset(inputs[order], labels[order], num_classes=L)


def train_test_split(ds: Dataset, test_ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle into disjoint, covering train and test parts."""
    if not 0.0 < test_ratio < 1.0:
        raise DatasetError(f"test_ratio must lie in (0, 1), got {test_ratio}")
    n = len(ds)
    n_test = int(round(n * test_ratio))
    if n_test < 1 or n_test >= n:
        raise DatasetError(f"cannot split {n} points with test_ratio={test_ratio}")
    order = np.random.default_rng(seed).permutation(n)
    return ds.take(order[n_test:], "train"), ds.take(order[:n_test], "test")


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    if len(ds) <= n:
        return ds
    index = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.take(index)


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        return handle.read()


def parse_idx(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """
    Decode an IDX buffer.

    The header is two zero bytes, a type code, the rank, then one big-endian
    uint32 per dimension; the payload follows in row-major order.
    """
    if len(raw) < 4:
        raise IdxTruncatedError(f"{name}: missing IDX header")
    zero, type_code, rank = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or type_code not in _IDX_ITEM or rank < 1:
        magic = struct.unpack_from(">I", raw, 0)[0]
        raise IdxMagicError(f"{name}: bad magic number 0x{magic:08X}")
    header_size = 4 + 4 * rank
    if len(raw) < header_size:
        raise IdxTruncatedError(f"{name}: truncated dimension header")
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    item = _IDX_ITEM[type_code]
    count = int(np.prod(dims))
    expected = header_size + count * item.itemsize
    if len(raw) < expected:
        raise IdxTruncatedError(f"{name}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=item, count=count, offset=header_size).reshape(dims)


def _magic(raw: bytes, name: str) -> int:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{name}: missing IDX header")
    return struct.unpack_from(">I", raw, 0)[0]


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             split_tag: str = "train", num_classes: int = None) -> Dataset:
    """
    Load an IDX image/label pair.

    Accepts unsigned-byte rank-3 images (pixels scaled by 1/255 and flattened
    to rows*cols) or float64 rank-2 inputs written by ``save_idx``.
    """
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)

    image_magic = _magic(image_bytes, str(images_path))
    label_magic = _magic(label_bytes, str(labels_path))
    if image_magic not in (IMAGES_MAGIC, FLOAT_INPUTS_MAGIC):
        raise IdxMagicError(f"{images_path}: bad magic number 0x{image_magic:08X}")
    if label_magic != LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: bad magic number 0x{label_magic:08X}")

    images = parse_idx(image_bytes, str(images_path))
    labels = parse_idx(label_bytes, str(labels_path)).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"Mismatch: {images.shape[0]} images but {labels.shape[0]} labels"
        )

    if images.dtype == _IDX_ITEM[IDX_UBYTE]:
        inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    classes = num_classes or int(labels.max()) + 1
    logger.info(f"Loaded IDX dataset {images_path}: {inputs.shape[0]} x {inputs.shape[1]}")
    return Dataset(inputs, labels, num_classes=classes, split_tag=split_tag)


def encode_idx(array: np.ndarray) -> bytes:
    """Encode a uint8 or float64 array as IDX."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        type_code, item = IDX_UBYTE, _IDX_ITEM[IDX_UBYTE]
    else:
        type_code, item = IDX_FLOAT64, _IDX_ITEM[IDX_FLOAT64]
    header = struct.pack(">HBB", 0, type_code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=item).tobytes()


def save_idx(ds: Dataset, images_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Cache a dataset as float64 rank-2 inputs plus ubyte labels."""
    if ds.num_classes > 256:
        raise DatasetError("IDX label cache holds at most 256 classes")
    atomic_write_bytes(Path(images_path), encode_idx(ds.inputs.astype(np.float64)))
    atomic_write_bytes(Path(labels_path), encode_idx(ds.labels.astype(np.uint8)))
    logger.info(f"Cached dataset ({len(ds)} points) to {images_path}")


def build_dataset(spec: DatasetSpec) -> Tuple[Dataset, Dataset]:
    """Materialize the (train, test) pair described by a DatasetSpec."""
    if spec.kind == "two_moons":
        full = gen_two_moons(spec.n, spec.noise_sigma, spec.seed)
    elif spec.kind == "blobs":
        full = gen_gaussian_blobs(spec.n, len(spec.centers), spec.centers, spec.sigma, spec.seed)
    else:
        full = load_idx(spec.images_path, spec.labels_path)
    full = subsample(full, spec.max_points, spec.seed)
    return train_test_split(full, spec.test_ratio, spec.seed)

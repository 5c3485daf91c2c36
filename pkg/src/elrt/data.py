"""Dataset containers and readers for the CIFAR-10 binary and MNIST IDX formats."""

from __future__ import annotations

import gzip
import os
import queue
import struct
import threading
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .tensor import default_dtype

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    """Images as uint8 (N, C, H, W); scaling and normalization happen per batch."""

    images: np.ndarray
    labels: np.ndarray
    classes: int = 10
    mean: Tuple[float, ...] = (0.0,)
    std: Tuple[float, ...] = (1.0,)
    augment: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        c = self.images.shape[1]
        if len(self.mean) not in (1, c) or len(self.std) not in (1, c):
            raise ValueError(f"normalization constants do not match {c} channels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def scaled(self, idx=slice(None)) -> np.ndarray:
        """Pixels in [0, 1]."""
        x = self.images[idx]
        if x.dtype == np.uint8:
            return x.astype(default_dtype()) / np.asarray(255, dtype=default_dtype())
        return x.astype(default_dtype())

    def normalize(self, x: np.ndarray) -> np.ndarray:
        dtype = default_dtype()
        mean = np.asarray(self.mean, dtype=dtype).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=dtype).reshape(1, -1, 1, 1)
        return (x - mean) / std

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def without_augmentation(self) -> "Dataset":
        return replace(self, augment=False)


def random_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Pad-and-crop plus horizontal flip, one draw per image."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _make_batch(ds: Dataset, idx: np.ndarray, rng: Optional[np.random.Generator]):
    x = ds.scaled(idx)
    if ds.augment and rng is not None:
        x = random_crop_flip(x, rng)
    return ds.normalize(x), ds.labels[idx]


def iterate_batches(ds: Dataset, batch_size: int, shuffle_seed=None, prefetch: bool = False
                    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a seeded order; ``shuffle_seed=None`` keeps dataset order.

    With ``prefetch`` a single producer thread prepares the next batch while the
    caller consumes the current one; batch content and order are unchanged.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
        rng = None
    else:
        rng = np.random.default_rng(shuffle_seed)
        order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if not prefetch:
        for idx in chunks:
            yield _make_batch(ds, idx, rng)
        return

    handoff: queue.Queue = queue.Queue(maxsize=1)
    done = object()

    def produce():
        try:
            for idx in chunks:
                handoff.put(_make_batch(ds, idx, rng))
        except BaseException as exc:  # surfaced on the consumer side
            handoff.put(exc)
        handoff.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    while True:
        item = handoff.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    worker.join()


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{source}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise ValueError(f"{source}: label byte {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def read_cifar_batch(path, expected_records: Optional[int] = None):
    with open(path, "rb") as f:
        raw = f.read()
    images, labels = parse_cifar_records(raw, str(path))
    if expected_records is not None and len(labels) != expected_records:
        raise ValueError(f"{path}: expected {expected_records} records, found {len(labels)}")
    return images, labels


def _cifar_dir(root) -> str:
    nested = os.path.join(root, "cifar-10-batches-bin")
    return nested if os.path.isdir(nested) else str(root)


def load_cifar10(root, augment_train: bool = True) -> Tuple[Dataset, Dataset]:
    """Train (data_batch_1..5) and test (test_batch) splits of the binary release."""
    d = _cifar_dir(root)
    parts = [read_cifar_batch(os.path.join(d, f"data_batch_{i}.bin"), 10000) for i in range(1, 6)]
    x_test, y_test = read_cifar_batch(os.path.join(d, "test_batch.bin"), 10000)
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                    10, CIFAR_MEAN, CIFAR_STD, augment_train)
    test = Dataset(x_test, y_test, 10, CIFAR_MEAN, CIFAR_STD, False)
    return train, test


def write_cifar_batch(path, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as f:
        f.write(np.concatenate([labels, images], axis=1).tobytes())


# ---------------------------------------------------------------------------
# MNIST IDX files


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def parse_idx(raw: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise ValueError(f"{source}: file too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise ValueError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = (count,) + struct.unpack(f">{ndim - 1}I", raw[8:8 + 4 * (ndim - 1)])
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) - offset != size:
        raise ValueError(f"{source}: payload has {len(raw) - offset} bytes, header implies {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims).copy()


def read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as f:
        return parse_idx(f.read(), expected_magic, str(path))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root, stem) -> str:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(root, cand)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] in {root}")


def read_mnist_split(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise ValueError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    return Dataset(images[:, None], labels.astype(np.int64), 10, MNIST_MEAN, MNIST_STD, False)


def load_mnist(root) -> Tuple[Dataset, Dataset]:
    out = []
    for split in ("train", "test"):
        img, lab = MNIST_FILES[split]
        out.append(read_mnist_split(_find(root, img), _find(root, lab)))
    return out[0], out[1]


def write_mnist(root, train: Tuple[np.ndarray, np.ndarray], test: Tuple[np.ndarray, np.ndarray]) -> None:
    os.makedirs(root, exist_ok=True)
    for split, (images, labels) in (("train", train), ("test", test)):
        img, lab = MNIST_FILES[split]
        write_idx(os.path.join(root, img), images)
        write_idx(os.path.join(root, lab), labels)


def load_dataset(root) -> Tuple[Dataset, Dataset]:
    """Detect the format of ``root`` (MNIST IDX or CIFAR-10 binary) and load it."""
    try:
        _find(root, MNIST_FILES["train"][0])
    except FileNotFoundError:
        return load_cifar10(root)
    return load_mnist(root)


# ---------------------------------------------------------------------------
# bundled MNIST subset


def mlxtend_mnist_csv() -> str:
    """Path of the 5000-digit MNIST sample shipped inside the ``mlxtend`` wheel."""
    from importlib import resources

    path = resources.files("mlxtend").joinpath("data", "data", "mnist_5k.csv.gz")
    if not path.is_file():
        raise FileNotFoundError("mlxtend is installed without its bundled mnist_5k.csv.gz")
    return str(path)


def export_mnist_subset(root, n_test_per_class: int = 100, csv_path: Optional[str] = None) -> str:
    """Write the bundled MNIST sample to ``root`` as IDX files.

    The first ``n_test_per_class`` digits of each class (in file order) go to
    the test split, the rest to training. Returns ``root``.
    """
    csv_path = csv_path or mlxtend_mnist_csv()
    with gzip.open(csv_path, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784]
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        test_mask[np.flatnonzero(labels == c)[:n_test_per_class]] = True
    write_mnist(root, (pixels[~test_mask], labels[~test_mask]), (pixels[test_mask], labels[test_mask]))
    return str(root)

"""Synthetic long-term memory tasks and the permuted pixel-by-pixel MNIST pipeline.

Token ids are 0-based: alphabet symbols are ``0..n-1``, the blank is ``n``
and the copy-task trigger is ``n + 1``.
"""

from __future__ import annotations

import gzip
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_PIXELS = 784

#: Start-End similarity classes by label index.
SIM_CLASSES = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class Vocabulary:
    n: int

    @property
    def blank(self) -> int:
        return self.n

    @property
    def trigger(self) -> int:
        return self.n + 1

    @property
    def size(self) -> int:
        return self.n + 2

    def render(self, tokens) -> str:
        """Letters for data symbols, ``_`` for blank, ``:`` for trigger."""
        chars = []
        for t in tokens:
            t = int(t)
            chars.append("_" if t == self.blank else ":" if t == self.trigger else chr(ord("A") + t))
        return "".join(chars)


@dataclass(frozen=True)
class CopyConfig:
    m: int
    B: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 2 or self.B < 0:
            raise ValueError("copy task needs m >= 1, n >= 2, B >= 0")

    @property
    def T(self) -> int:
        return self.B + 2 * self.m

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n)


@dataclass(frozen=True)
class SimConfig:
    T: int
    m: int
    n: int

    def __post_init__(self):
        if self.T % 2 or self.m % 2 or self.m < 2:
            raise ValueError("similarity task needs even T and even m >= 2")
        if not self.m < self.T // 2:
            raise ValueError("m must be smaller than T/2")
        if self.n < 2:
            raise ValueError("alphabet needs at least two symbols")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n)


@dataclass
class TaskSample:
    input: np.ndarray
    target: np.ndarray | int  # per-step tokens (copy) or class index (similarity)

    def to_json(self) -> str:
        doc = {"input": [int(x) for x in self.input]}
        if isinstance(self.target, np.ndarray):
            doc["target"] = [int(x) for x in self.target]
        else:
            doc["class"] = int(self.target)
        return json.dumps(doc)


# ---------------------------------------------------------------------------
# copying memory


def copy_batch(cfg: CopyConfig, rng: np.random.Generator, N: int) -> tuple[np.ndarray, np.ndarray]:
    """``N`` copy samples as ``(inputs, targets)``, both ``(N, T)`` int arrays."""
    m, B, T = cfg.m, cfg.B, cfg.T
    blank = cfg.vocab.blank
    data = rng.integers(0, cfg.n, size=(N, m))
    x = np.full((N, T), blank, dtype=np.int64)
    y = np.full((N, T), blank, dtype=np.int64)
    x[:, :m] = data
    x[:, m + B] = cfg.vocab.trigger
    y[:, T - m:] = data
    return x, y


def gen_copy(cfg: CopyConfig, rng: np.random.Generator) -> TaskSample:
    x, y = copy_batch(cfg, rng, 1)
    return TaskSample(x[0], y[0])


def data_accuracy(preds, targets, m: int, B: int) -> float:
    """Per-character accuracy over the final m steps, averaged over samples."""
    preds = np.atleast_2d(np.asarray(preds))
    targets = np.atleast_2d(np.asarray(targets))
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    T = B + 2 * m
    if preds.shape[1] != T:
        raise ValueError(f"sequences have length {preds.shape[1]}, expected {T}")
    return float(np.mean(preds[:, m + B:] == targets[:, m + B:]))


def bits_memorized(m: int, n: int) -> float:
    if n < 2:
        raise ValueError("n must be at least 2")
    return m * math.log2(n)


# ---------------------------------------------------------------------------
# Start-End similarity


def _differing(rng: np.random.Generator, symbols: np.ndarray, n: int) -> np.ndarray:
    # uniform over the n-1 symbols that differ
    shift = rng.integers(1, n, size=symbols.shape)
    return (symbols + shift) % n


def sim_batch(cfg: SimConfig, rng: np.random.Generator, N: int) -> tuple[np.ndarray, np.ndarray]:
    """``N`` similarity samples as ``(inputs (N, T), labels (N,))``."""
    T, m, n = cfg.T, cfg.m, cfg.n
    half = T // 2
    x = np.full((N, T), cfg.vocab.blank, dtype=np.int64)
    labels = rng.integers(0, 3, size=N)
    starts = rng.integers(0, half - m, size=N)
    s1 = rng.integers(0, n, size=(N, m))
    s2 = _differing(rng, s1, n)
    for i in range(N):
        if labels[i] == 2:
            s2[i] = s1[i]
        elif labels[i] == 1:
            same = rng.choice(m, size=m // 2, replace=False)
            s2[i, same] = s1[i, same]
        t = starts[i]
        x[i, t:t + m] = s1[i]
        x[i, t + half:t + half + m] = s2[i]
    return x, labels


def gen_sim(cfg: SimConfig, rng: np.random.Generator) -> TaskSample:
    x, labels = sim_batch(cfg, rng, 1)
    return TaskSample(x[0], int(labels[0]))


def aligned_matches(tokens, blank: int) -> int:
    """Number of aligned non-blank pairs ``(x[t], x[t + T/2])`` that agree."""
    tokens = np.asarray(tokens)
    half = tokens.shape[-1] // 2
    a, b = tokens[..., :half], tokens[..., half:]
    return int(np.sum((a == b) & (a != blank)))


def sim_class(tokens, m: int, blank: int) -> int:
    """Class label of a similarity sequence from its aligned match count."""
    matches = aligned_matches(tokens, blank)
    if matches == m:
        return 2
    if matches == m // 2:
        return 1
    if matches == 0:
        return 0
    raise ValueError(f"{matches} aligned matches fits no class")


# ---------------------------------------------------------------------------
# MNIST


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path, magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file with the given magic number."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} < {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 array as IDX (1-D labels or 3-D images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: LABEL_MAGIC, 3: IMAGE_MAGIC}[array.ndim]
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    Path(path).write_bytes(gzip.compress(payload) if compress else payload)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as an ``(N, 784)`` float array in [0, 1] and labels as ints."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.reshape(images.shape[0], -1).astype(np.float64) / 255.0, labels.astype(np.int64)


def pixel_permutation(seed: int, size: int = MNIST_PIXELS) -> np.ndarray:
    """Fixed pixel order for a seed; seed 0 keeps raster order."""
    if seed == 0:
        return np.arange(size)
    return np.random.default_rng(seed).permutation(size)


def permute_pixels(images: np.ndarray, seed: int) -> np.ndarray:
    """Reorder every image's pixels by the same seeded permutation."""
    images = np.asarray(images)
    return images[:, pixel_permutation(seed, images.shape[1])]


def validation_split(X: np.ndarray, y: np.ndarray, k: int, seed: int = 0):
    """Shuffle with ``seed`` and hold out the last ``k`` examples."""
    N = X.shape[0]
    if not 0 <= k < N:
        raise ValueError(f"validation size {k} must be below N={N}")
    order = np.random.default_rng(seed).permutation(N)
    train, val = order[: N - k], order[N - k:]
    return (X[train], y[train]), (X[val], y[val])


#: Standard archive names and their MD5 digests.
MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train_labels": ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    "test_images": ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    "test_labels": ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
}
DATA_DIR_ENV = "SEPRANK_DATA_DIR"


class DataMissing(FileNotFoundError):
    pass


def default_data_dir(configured=None) -> Path:
    """The environment variable wins over ``configured``, which wins over ``./data/mnist``."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(configured) if configured else Path("data") / "mnist"


def find_mnist(data_dir) -> dict[str, Path]:
    """Paths of the four IDX files, gzipped or not."""
    data_dir = Path(data_dir)
    found = {}
    for key, (name, _) in MNIST_FILES.items():
        for candidate in (data_dir / name, data_dir / name[:-3]):
            if candidate.is_file():
                found[key] = candidate
                break
        else:
            raise DataMissing(f"{name} not found in {data_dir}; run `deepmem fetch-mnist --out {data_dir}` "
                              f"or set {DATA_DIR_ENV}")
    return found


def permuted_mnist_splits(data_dir, permutation_seed: int, val_size: int = 5000,
                          train_subset: int | None = None, test_subset: int | None = None,
                          split_seed: int = 0):
    """``(train, val, test)`` pairs with images shaped ``(N, 784, 1)`` for pixel-by-pixel input."""
    paths = find_mnist(data_dir)
    X, y = load_mnist_idx(paths["train_images"], paths["train_labels"])
    X_test, y_test = load_mnist_idx(paths["test_images"], paths["test_labels"])
    X = permute_pixels(X, permutation_seed)[..., None]
    X_test = permute_pixels(X_test, permutation_seed)[..., None]
    train, val = validation_split(X, y, val_size, split_seed)
    if train_subset is not None:
        train = (train[0][:train_subset], train[1][:train_subset])
    if test_subset is not None:
        X_test, y_test = X_test[:test_subset], y_test[:test_subset]
    return train, val, (X_test, y_test)

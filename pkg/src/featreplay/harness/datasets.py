"""Synthetic datasets, IDX image/label files, and epoch-shuffled batching."""
import struct
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08

KINDS = ("synthetic_gaussian_classes", "synthetic_regression", "two_spirals", "idx_images")


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    num_classes: int | None = None

    @property
    def input_shape(self):
        return self.x_train.shape[1:]


@dataclass
class DatasetSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    eval_fraction: float = 0.2

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed,
                "eval_fraction": self.eval_fraction}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], dict(d.get("params", {})), d.get("seed", 0), d.get("eval_fraction", 0.2))


# ---------------------------------------------------------------------------
# IDX

def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a numpy array of its declared shape."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}, expected 4-byte magic"
                             + (f" 0x{expected_magic:08x}" if expected_magic is not None else ""))
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != _IDX_UBYTE:
        raise IdxFormatError(f"{path}: unsupported magic 0x{magic:08x} at offset 0, expected "
                             f"0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension list at offset {len(raw)}, "
                             f"expected {ndim} dims ending at offset {header}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IdxFormatError(f"{path}: payload at offset {header} has {len(raw) - header} bytes, "
                             f"expected {count} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", (_IDX_UBYTE << 8) | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_images(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic generators (raw, before normalization)

def make_gaussian_classes(n, d, classes, rng, separation=2.0, noise=1.0):
    centers = rng.normal((classes, d)) * separation
    y = rng.integers(0, classes, n)
    x = centers[y] + rng.normal((n, d)) * noise
    return x, y


def make_regression(n, d, out_dim, rng, noise=0.1):
    x = rng.normal((n, d))
    coef = rng.normal((d, out_dim)) / np.sqrt(d)
    y = x @ coef + rng.normal((n, out_dim)) * noise
    return x, y


def make_two_spirals(n, rng, noise=0.0, turns=1.5):
    """Two interleaved spirals: class 0 at r * (cos theta, sin theta) with
    r = theta / (2 pi turns), class 1 the point reflection of class 0."""
    half = n // 2
    theta = np.sqrt(rng.uniform(0.0, 1.0, n)) * 2 * np.pi * turns
    r = theta / (2 * np.pi * turns)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    y = np.zeros(n, dtype=np.int64)
    y[half:] = 1
    pts[half:] *= -1
    pts += rng.normal((n, 2)) * noise
    return pts, y


def _standardize(x_train, x_eval):
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0] = 1.0
    return (x_train - mean) / std, (x_eval - mean) / std


def _split(x, y, eval_fraction, rng):
    perm = rng.permutation(len(x))
    n_eval = int(round(len(x) * eval_fraction))
    ev, tr = perm[:n_eval], perm[n_eval:]
    return x[tr], y[tr], x[ev], y[ev]


def load_dataset(spec):
    """Deterministically build (train, eval) arrays from a :class:`DatasetSpec`."""
    if isinstance(spec, dict):
        spec = DatasetSpec.from_dict(spec)
    p = spec.params
    gen = Rng(spec.seed, 2, 0)
    split_rng = Rng(spec.seed, 2, 1)
    if spec.kind == "idx_images":
        x, y = load_idx_images(p["train_images"], p["train_labels"])
        classes = int(p.get("num_classes", 10))
        if "eval_images" in p:
            xe, ye = load_idx_images(p["eval_images"], p["eval_labels"])
            return Dataset(x, y, xe, ye, classes)
        return Dataset(*_split(x, y, spec.eval_fraction, split_rng), classes)

    if spec.kind == "synthetic_gaussian_classes":
        classes = int(p.get("classes", 4))
        x, y = make_gaussian_classes(int(p.get("n_samples", 1000)), int(p.get("dims", 20)), classes, gen,
                                     separation=p.get("separation", 2.0), noise=p.get("noise", 1.0))
    elif spec.kind == "synthetic_regression":
        classes = None
        x, y = make_regression(int(p.get("n_samples", 1000)), int(p.get("dims", 10)),
                               int(p.get("output_dim", 1)), gen, noise=p.get("noise", 0.1))
    elif spec.kind == "two_spirals":
        classes = 2
        x, y = make_two_spirals(int(p.get("n_samples", 400)), gen, noise=p.get("noise", 0.0),
                                turns=p.get("turns", 1.5))
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    xt, yt, xe, ye = _split(x, y, spec.eval_fraction, split_rng)
    xt, xe = _standardize(xt, xe)
    return Dataset(xt, yt, xe, ye, classes)


class BatchSampler:
    """Shuffled-epoch mini-batches; epoch e uses the permutation from ``Rng(seed, 1, e)``.

    The batch for iteration t depends only on (seed, t), so resuming needs no
    sampler state beyond the iteration counter. Trailing partial batches are
    dropped so every iteration sees the same batch size.
    """

    def __init__(self, n, batch_size, seed):
        if batch_size > n:
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.steps_per_epoch = n // batch_size
        self._cache = (None, None)

    def epoch_of(self, t):
        return t // self.steps_per_epoch

    def indices(self, t):
        epoch, pos = divmod(t, self.steps_per_epoch)
        if self._cache[0] != epoch:
            self._cache = (epoch, Rng(self.seed, 1, epoch).permutation(self.n))
        return self._cache[1][pos * self.batch_size:(pos + 1) * self.batch_size]

"""Dense float64 tensor helpers and seeded randomness.

Tensors are plain C-ordered ``np.float64`` arrays. Only the optimizer mutates
them in place.
"""
import numpy as np

from . import _backend

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "relu", "relu_grad_mask")


class Rng:
    """Counter-based (Philox) generator keyed by a seed and an optional stream path.

    ``Rng(seed, 0, 3)`` and ``Rng(seed, 0, 4)`` are independent streams, so each
    layer or epoch can draw without depending on what the others consumed.
    """

    def __init__(self, seed, *stream):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *stream):
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, size):
        return self._gen.standard_normal(size)

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    @property
    def state(self):
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value):
        self._gen.bit_generator.state = value


def as_tensor(data):
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a, b):
    """Matrix product with a fixed left-to-right reduction per output element."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _backend.kernels.matmul(a, b)


def elementwise(op, a, b=None):
    if op in ("relu", "relu_grad_mask"):
        if op == "relu":
            return np.maximum(a, 0.0)
        return (a > 0).astype(np.float64)
    if op == "scale":
        if not np.isscalar(b):
            raise ValueError("scale expects a scalar")
        return a * float(b)
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if not np.isscalar(b) and np.shape(b) != np.shape(a):
        raise ValueError(f"elementwise shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def randn(shape, rng, stddev=1.0):
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    return rng.normal(tuple(shape)) * stddev

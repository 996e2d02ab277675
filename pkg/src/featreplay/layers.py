"""Layer primitives with explicit forward / vector-Jacobian maps, plus losses.

Layers never cache their input: ``backward`` receives it explicitly, so a
module can be re-run (replayed) from any stored feature.
"""
import math

import numpy as np

from . import _backend
from .tensor import Rng, matmul, randn


class ShapeError(ValueError):
    pass


def _check_input(layer, x):
    if x.shape[1:] != layer.in_shape:
        raise ShapeError(f"{layer.kind}: expected input (batch, *{layer.in_shape}), got {x.shape}")


class Layer:
    kind = "layer"

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.params = []

    @property
    def param_shapes(self):
        return [p.shape for p in self.params]

    @property
    def param_count(self):
        return sum(p.size for p in self.params)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, upstream, need_input_grad=True):
        """Return ``(weight_grads, input_grad)``; ``input_grad`` is None when not needed."""
        raise NotImplementedError

    def _check_upstream(self, x, upstream):
        if upstream.shape != (x.shape[0], *self.out_shape):
            raise ShapeError(f"{self.kind}: upstream {upstream.shape} does not match output "
                             f"{(x.shape[0], *self.out_shape)}")

    def describe(self):
        return {"kind": self.kind}

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"


class Linear(Layer):
    """``y = W x + b`` per sample, with ``W`` of shape (out, in)."""

    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None, init_stddev=None):
        super().__init__((in_features,), (out_features,))
        if init_stddev is None:
            init_stddev = math.sqrt(2.0 / in_features)
        self.init_stddev = init_stddev
        rng = rng if rng is not None else Rng(0)
        self.weight = randn((out_features, in_features), rng, init_stddev)
        self.params = [self.weight]
        self.bias = None
        if bias:
            self.bias = np.zeros(out_features)
            self.params.append(self.bias)

    def forward(self, x):
        _check_input(self, x)
        y = matmul(x, self.weight.T)
        if self.bias is not None:
            y += self.bias
        return y

    def backward(self, x, upstream, need_input_grad=True):
        _check_input(self, x)
        self._check_upstream(x, upstream)
        grads = [matmul(upstream.T, x)]
        if self.bias is not None:
            grads.append(upstream.sum(axis=0))
        dx = matmul(upstream, self.weight) if need_input_grad else None
        return grads, dx

    def describe(self):
        return {"kind": self.kind, "out": self.out_shape[0], "bias": self.bias is not None}


class ReLU(Layer):
    kind = "relu"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def forward(self, x):
        _check_input(self, x)
        return np.maximum(x, 0.0)

    def backward(self, x, upstream, need_input_grad=True):
        self._check_upstream(x, upstream)
        return [], (upstream * (x > 0) if need_input_grad else None)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, in_shape):
        super().__init__(in_shape, (int(np.prod(in_shape)),))

    def forward(self, x):
        _check_input(self, x)
        return x.reshape(x.shape[0], -1).copy()

    def backward(self, x, upstream, need_input_grad=True):
        self._check_upstream(x, upstream)
        return [], (upstream.reshape(x.shape).copy() if need_input_grad else None)


class Conv2d(Layer):
    """Direct 2-D convolution (cross-correlation) on (C, H, W) inputs; no dilation."""

    kind = "conv2d"

    def __init__(self, in_shape, out_channels, kernel_size, stride=1, padding=0, rng=None,
                 init_stddev=None):
        c, h, w = in_shape
        kh = kw = kernel_size
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (w + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {kernel_size} too large for input {in_shape}")
        super().__init__(in_shape, (out_channels, ho, wo))
        self.stride = stride
        self.padding = padding
        if init_stddev is None:
            init_stddev = math.sqrt(2.0 / (c * kh * kw))
        self.init_stddev = init_stddev
        rng = rng if rng is not None else Rng(0)
        self.weight = randn((out_channels, c, kh, kw), rng, init_stddev)
        self.bias = np.zeros(out_channels)
        self.params = [self.weight, self.bias]

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return np.ascontiguousarray(x)
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        _check_input(self, x)
        return _backend.kernels.conv2d_forward(self._pad(x), self.weight, self.bias, self.stride)

    def backward(self, x, upstream, need_input_grad=True):
        _check_input(self, x)
        self._check_upstream(x, upstream)
        k = _backend.kernels
        xp = self._pad(x)
        upstream = np.ascontiguousarray(upstream)
        kh, kw = self.weight.shape[2:]
        dw = k.conv2d_backward_weight(xp, upstream, kh, kw, self.stride)
        db = upstream.sum(axis=(0, 2, 3))
        dx = None
        if need_input_grad:
            dxp = k.conv2d_backward_input(self.weight, upstream, xp.shape, self.stride)
            p = self.padding
            dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p].copy() if p else dxp
        return [dw, db], dx

    def describe(self):
        return {"kind": self.kind, "out_channels": self.out_shape[0],
                "kernel_size": self.weight.shape[2], "stride": self.stride,
                "padding": self.padding}


LOSS_KINDS = ("softmax_cross_entropy", "mse", "half_mse")


class Loss:
    """Batch-mean loss.

    ``mse`` averages squared error over every element; ``half_mse`` is the same
    scaled by one half (gradient ``(pred - target) / n``).
    """

    def __init__(self, kind, num_classes=None):
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {kind!r}")
        if kind == "softmax_cross_entropy" and not num_classes:
            raise ValueError("softmax_cross_entropy needs num_classes")
        self.kind = kind
        self.num_classes = num_classes

    def _labels(self, prediction, target):
        labels = np.asarray(target)
        if prediction.ndim != 2 or prediction.shape[1] != self.num_classes:
            raise ShapeError(f"expected logits (batch, {self.num_classes}), got {prediction.shape}")
        if labels.shape != (prediction.shape[0],):
            raise ShapeError(f"expected {prediction.shape[0]} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return labels.astype(np.intp)

    def _targets(self, prediction, target):
        target = np.asarray(target, dtype=np.float64)
        if target.shape != prediction.shape:
            raise ShapeError(f"target {target.shape} does not match prediction {prediction.shape}")
        return target

    def forward(self, prediction, target):
        if self.kind == "softmax_cross_entropy":
            labels = self._labels(prediction, target)
            shift = prediction.max(axis=1, keepdims=True)
            lse = np.log(np.exp(prediction - shift).sum(axis=1)) + shift[:, 0]
            picked = prediction[np.arange(len(labels)), labels]
            return float(np.mean(lse - picked))
        err = prediction - self._targets(prediction, target)
        sq = float(np.mean(err * err))
        return 0.5 * sq if self.kind == "half_mse" else sq

    def backward(self, prediction, target):
        if self.kind == "softmax_cross_entropy":
            labels = self._labels(prediction, target)
            shift = prediction.max(axis=1, keepdims=True)
            e = np.exp(prediction - shift)
            probs = e / e.sum(axis=1, keepdims=True)
            probs[np.arange(len(labels)), labels] -= 1.0
            return probs / prediction.shape[0]
        err = prediction - self._targets(prediction, target)
        scale = 1.0 if self.kind == "half_mse" else 2.0
        return err * (scale / err.size)

    def describe(self):
        d = {"kind": self.kind}
        if self.num_classes:
            d["num_classes"] = self.num_classes
        return d


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))

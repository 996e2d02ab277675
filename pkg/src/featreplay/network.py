"""Sequential networks, contiguous module partitions, and module-level maps.

Modules are indexed from 0. Module ``k`` of ``K`` owns layers
``boundaries[k-1]:boundaries[k]`` (with an implicit leading 0).
"""
from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Flatten, Linear, Loss, ReLU, ShapeError
from .tensor import Rng


class Network:
    def __init__(self, layers, loss):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_shape != b.in_shape:
                raise ShapeError(f"{a!r} does not compose with {b!r}")
        self.layers = list(layers)
        self.loss = loss

    def __len__(self):
        return len(self.layers)

    @property
    def in_shape(self):
        return self.layers[0].in_shape

    @property
    def out_shape(self):
        return self.layers[-1].out_shape

    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_count(self):
        return sum(layer.param_count for layer in self.layers)

    def feature_shapes(self):
        """Per-sample shapes of h_0 (the input) through h_L."""
        return [self.in_shape] + [layer.out_shape for layer in self.layers]

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def predict(self, x, batch_size=1024):
        return np.concatenate([self.forward(x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)])


def build_network(input_shape, architecture, loss, seed=0):
    """Build a network from a list of layer dicts.

    Each dict has ``kind`` in {linear, relu, conv2d, flatten} plus that layer's
    hyperparameters (``out`` for linear; ``out_channels``, ``kernel_size``,
    ``stride``, ``padding`` for conv2d). Layer ``i`` draws its initial weights
    from ``Rng(seed, 0, i)``.
    """
    shape = tuple(input_shape)
    layers = []
    for i, spec in enumerate(architecture):
        kind = spec["kind"]
        rng = Rng(seed, 0, i)
        if kind == "linear":
            if len(shape) != 1:
                raise ShapeError(f"linear layer {i} needs a flat input, got {shape}")
            layer = Linear(shape[0], spec["out"], bias=spec.get("bias", True), rng=rng,
                           init_stddev=spec.get("init_stddev"))
        elif kind == "relu":
            layer = ReLU(shape)
        elif kind == "flatten":
            layer = Flatten(shape)
        elif kind == "conv2d":
            layer = Conv2d(shape, spec["out_channels"], spec["kernel_size"],
                           stride=spec.get("stride", 1), padding=spec.get("padding", 0), rng=rng,
                           init_stddev=spec.get("init_stddev"))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    if isinstance(loss, dict):
        loss = Loss(loss["kind"], loss.get("num_classes"))
    return Network(layers, loss)


def mlp_architecture(hidden, out, depth):
    """``depth`` linear layers with ReLU between them (2 * depth - 1 layers total)."""
    arch = []
    for _ in range(depth - 1):
        arch += [{"kind": "linear", "out": hidden}, {"kind": "relu"}]
    arch.append({"kind": "linear", "out": out})
    return arch


@dataclass(frozen=True)
class ModulePartition:
    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if not b or any(x <= y for x, y in zip(b[1:], b)) or b[0] < 1:
            raise ValueError(f"boundaries must be strictly increasing and >= 1: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def K(self):
        return len(self.boundaries)

    @property
    def num_layers(self):
        return self.boundaries[-1]

    def layer_range(self, k):
        start = self.boundaries[k - 1] if k > 0 else 0
        return range(start, self.boundaries[k])

    def module_of(self, layer_index):
        for k, end in enumerate(self.boundaries):
            if layer_index < end:
                return k
        raise IndexError(layer_index)

    def param_slices(self, net):
        """Index ranges into ``net.params()`` owned by each module."""
        counts = [len(layer.params) for layer in net.layers]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        return [range(offsets[r.start], offsets[r.stop]) for r in map(self.layer_range, range(self.K))]


def _balanced_cuts(costs, K):
    """Contiguous split of ``costs`` into K non-empty parts minimizing the max part cost.

    Ties are broken toward smaller sum of squared part costs, then toward more
    even layer counts.
    """
    n = len(costs)
    prefix = np.concatenate([[0.0], np.cumsum(costs, dtype=float)])
    inf = (float("inf"),) * 3
    # best[j][i]: score for splitting costs[:i] into j parts
    best = [[inf] * (n + 1) for _ in range(K + 1)]
    back = [[0] * (n + 1) for _ in range(K + 1)]
    best[0][0] = (0.0, 0.0, 0.0)
    for j in range(1, K + 1):
        for i in range(j, n - (K - j) + 1):
            for s in range(j - 1, i):
                prev = best[j - 1][s]
                if prev[0] == float("inf"):
                    continue
                c = prefix[i] - prefix[s]
                cand = (max(prev[0], c), prev[1] + c * c, prev[2] + (i - s) ** 2)
                if cand < best[j][i]:
                    best[j][i] = cand
                    back[j][i] = s
    cuts, i = [], n
    for j in range(K, 0, -1):
        cuts.append(i)
        i = back[j][i]
    return tuple(reversed(cuts))


def partition(net, K=None, mode="param", boundaries=None):
    """Split ``net`` into K contiguous modules.

    ``mode`` is ``"explicit"`` (use ``boundaries``), ``"param"`` (balance
    parameter counts) or ``"layer"`` (balance layer counts).
    """
    L = len(net)
    if mode == "explicit" or boundaries is not None:
        part = ModulePartition(tuple(boundaries))
        if part.num_layers != L:
            raise ValueError(f"last boundary must equal the layer count {L}, got {part.boundaries}")
        if K is not None and part.K != K:
            raise ValueError(f"{part.K} boundaries given but K={K}")
        return part
    if K is None or K < 1:
        raise ValueError("K must be a positive integer")
    if K > L:
        raise ValueError(f"cannot split {L} layers into K={K} modules")
    if mode == "param":
        costs = [layer.param_count for layer in net.layers]
    elif mode == "layer":
        costs = [1] * L
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return ModulePartition(_balanced_cuts(costs, K))


def module_forward(net, part, k, x):
    h = x
    for i in part.layer_range(k):
        h = net.layers[i].forward(h)
    return h


def module_replay(net, part, k, x):
    """Forward through module k keeping every layer input; returns [input, ..., output]."""
    acts = [x]
    for i in part.layer_range(k):
        acts.append(net.layers[i].forward(acts[-1]))
    return acts


def module_backprop(net, part, k, acts, delta, need_input_grad=True):
    """Chain ``delta`` (gradient at the module output) back through stored activations.

    Returns ``(grads, input_grad)`` where ``grads`` is the flat list of weight
    gradients for the module's parameters in ``net.params()`` order.
    """
    idx = part.layer_range(k)
    if delta.shape != acts[-1].shape:
        raise ShapeError(f"module {k}: delta {delta.shape} does not match output {acts[-1].shape}")
    per_layer = [None] * len(idx)
    upstream = delta
    for j in reversed(range(len(idx))):
        layer = net.layers[idx[j]]
        want = need_input_grad or j > 0
        per_layer[j], upstream = layer.backward(acts[j], upstream, need_input_grad=want)
    grads = [g for layer_grads in per_layer for g in layer_grads]
    return grads, (upstream if need_input_grad else None)


def module_backward(net, part, k, x, delta, need_input_grad=True):
    """Replay module k from ``x`` and backpropagate ``delta`` through the rebuilt graph."""
    return module_backprop(net, part, k, module_replay(net, part, k, x), delta, need_input_grad)


def full_gradient(net, x, y):
    """Plain backpropagation on one batch: returns ``(loss, grads)``."""
    acts = [x]
    for layer in net.layers:
        acts.append(layer.forward(acts[-1]))
    loss = net.loss.forward(acts[-1], y)
    upstream = net.loss.backward(acts[-1], y)
    per_layer = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        per_layer[i], upstream = net.layers[i].backward(acts[i], upstream, need_input_grad=i > 0)
    return loss, [g for layer_grads in per_layer for g in layer_grads]


def evaluate(net, x, y, batch_size=1024):
    """Batch-weighted mean loss and (for classification) accuracy on a dataset."""
    from .layers import accuracy

    total, correct = 0.0, 0.0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        out = net.forward(xb)
        total += net.loss.forward(out, yb) * len(xb)
        if net.loss.kind == "softmax_cross_entropy":
            correct += accuracy(out, yb) * len(xb)
    n = len(x)
    acc = correct / n if net.loss.kind == "softmax_cross_entropy" else None
    return total / n, acc

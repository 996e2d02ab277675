"""Empirical checks of the convergence assumptions, plus memory accounting and
finite-difference gradient checks."""
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer
from .network import Network, full_gradient

SIGMA_GUARD = 1e-20


def _dot(xs, ys):
    return math.fsum(float(np.vdot(a, b)) for a, b in zip(xs, ys))


def _sqnorm(xs):
    return _dot(xs, xs)


@dataclass
class SigmaEstimate:
    iteration: int
    per_module: list
    global_: float | None


def estimate_sigma(module_grads, true_grads, part_slices, iteration=0):
    """Ratio <grad f, g> / ||grad f||^2, per module block and over all weights.

    ``module_grads`` holds one list of weight gradients per module;
    ``true_grads`` is the flat backpropagation gradient on the same weights and
    batch; ``part_slices`` maps each module to its indices in the flat list.
    Ratios whose denominator is below ``SIGMA_GUARD`` are None.
    """
    per_module = []
    num_total, den_total = [], []
    for grads, idx in zip(module_grads, part_slices):
        true_block = [true_grads[i] for i in idx]
        num, den = _dot(true_block, grads), _sqnorm(true_block)
        num_total.append(num)
        den_total.append(den)
        per_module.append(num / den if den >= SIGMA_GUARD else None)
    den = math.fsum(den_total)
    glob = math.fsum(num_total) / den if den >= SIGMA_GUARD else None
    return SigmaEstimate(iteration, per_module, glob)


# ---------------------------------------------------------------------------
# memory accounting

@dataclass
class MemoryAccount:
    algorithm: str
    activation_floats: int
    history_floats: int
    delta_floats: int
    weight_floats: int

    @property
    def total(self):
        return self.activation_floats + self.history_floats + self.delta_floats + self.weight_floats


def account_memory(net, part, algorithm, batch_size=1):
    """Exact float counts implied by each algorithm's storage contract.

    BP keeps one activation per layer (h_1..h_L) for the current iteration.
    FR keeps the same transient activations while replaying, plus K - k + 1
    stored inputs per module (1-based k) and one pending delta per module
    boundary. DDG keeps, for each of the K - k + 1 in-flight iterations of
    module k, the module's whole activation stack (its input and every layer
    output), plus one pending delta per boundary. Module inputs that are the
    previous module's output are the same tensor and are counted once, and the
    current data batch counts only where it is retained as history.
    """
    algorithm = algorithm.lower()
    sizes = [batch_size * int(np.prod(s)) for s in net.feature_shapes()]
    K = part.K
    weights = net.param_count
    bp_acts = sum(sizes[1:])
    if algorithm == "bp":
        return MemoryAccount("bp", bp_acts, 0, 0, weights)
    ends = [0, *part.boundaries]
    deltas = sum(sizes[e] for e in part.boundaries[:-1])
    if algorithm == "fr":
        history = sum((K - k) * sizes[ends[k]] for k in range(K))
        return MemoryAccount("fr", bp_acts, history, deltas, weights)
    if algorithm == "ddg":
        acts = K * sizes[0]
        for k in range(K):
            acts += (K - k) * sum(sizes[l + 1] for l in part.layer_range(k))
        return MemoryAccount("ddg", acts, 0, deltas, weights)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def count_stored_floats(trainer):
    """Sum of sizes of the distinct arrays a trainer currently retains, per category."""
    seen = set()
    counts = {}
    for category, arrays in trainer.stored_arrays().items():
        total = 0
        for a in arrays:
            if id(a) not in seen:
                seen.add(id(a))
                total += a.size
        counts[category] = total
    return counts


# ---------------------------------------------------------------------------
# theory probes

def flat(arrays):
    arrays = list(arrays)
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


@dataclass
class TheoryProbe:
    """Running lower-bound estimates of the smoothness and second-moment constants.

    ``lipschitz`` is the max of ||grad f(x) - grad f(y)|| / ||x - y|| over the
    sampled weight/gradient pairs; ``second_moment`` is the running max of
    ||sum_k g_k||^2; ``gamma_sum`` accumulates the stepsizes seen so far.
    """

    max_samples: int = 64
    lipschitz: float = 0.0
    second_moment: float = 0.0
    gamma_sum: float = 0.0
    _points: list = field(default_factory=list, repr=False)

    def add_point(self, weights, true_grad):
        w, g = flat(weights), flat(true_grad)
        for w0, g0 in self._points:
            dist = float(np.linalg.norm(w - w0))
            if dist > 0:
                self.lipschitz = max(self.lipschitz, float(np.linalg.norm(g - g0)) / dist)
        self._points.append((w, g))
        if len(self._points) > self.max_samples:
            self._points.pop(0)

    def add_direction(self, grads):
        self.second_moment = max(self.second_moment, _sqnorm(grads))

    def add_step(self, gamma):
        self.gamma_sum += gamma


def descent_probe_terms(f_next, f_now, grad_sqnorm, sigma, gamma, lipschitz, second_moment):
    """Per-iteration residual of the one-step descent inequality; <= 0 when it holds."""
    return f_next - f_now + sigma * gamma * grad_sqnorm - gamma ** 2 * lipschitz * second_moment / 2


# ---------------------------------------------------------------------------
# convergence report

class InsufficientSamples(ValueError):
    pass


def _probed(records):
    rows = [(r["iteration"], float(r["grad_norm"]) ** 2, float(r["step_size"]))
            for r in records if r.get("grad_norm") not in (None, "")]
    if len(rows) < 10:
        raise InsufficientSamples(f"need at least 10 probed iterations, got {len(rows)}")
    return rows


def trailing_mean(records, frac=0.2):
    """Mean of ||grad f||^2 over the last ``frac`` of the probed iterations."""
    rows = _probed(records)
    tail = rows[-max(1, int(round(len(rows) * frac))):]
    return float(np.mean([g for _, g, _ in tail]))


def head_tail_means(records, frac=0.1):
    rows = _probed(records)
    n = max(1, int(round(len(rows) * frac)))
    return float(np.mean([g for _, g, _ in rows[:n]])), float(np.mean([g for _, g, _ in rows[-n:]]))


def convergence_report(records, schedule, sigma_min=None, lipschitz=None, second_moment=None,
                       f0=None, f_best=None, window=0.2):
    """Summarize a run's gradient-norm trace against the fixed / diminishing-step theory.

    ``records`` are metrics rows with ``grad_norm`` filled on probed iterations.
    The bound uses the sampled constants (lower bounds on the true ones) and the
    best observed loss in place of the optimum.
    """
    rows = _probed(records)
    T = rows[-1][0] + 1
    g2 = np.array([g for _, g, _ in rows])
    gammas = np.array([s for _, _, s in rows])
    head, tail = head_tail_means(records, 0.1)
    report = {
        "schedule": schedule.kind,
        "iterations": T,
        "probes": len(rows),
        "mean_grad_sq": float(g2.mean()),
        "trailing_mean_grad_sq": trailing_mean(records, window),
        "head_mean_grad_sq": head,
        "tail_mean_grad_sq": tail,
        "weighted_mean_grad_sq": float((gammas * g2).sum() / gammas.sum()),
    }
    if schedule.kind == "inverse_t":
        report["decreasing"] = tail < head
    have_constants = None not in (sigma_min, lipschitz, second_moment, f0, f_best)
    if have_constants and sigma_min > 0:
        if schedule.kind == "fixed":
            gamma = schedule.gamma0
            bound = (f0 - f_best) / (sigma_min * gamma * T) + gamma * lipschitz * second_moment / (2 * sigma_min)
            observed = report["mean_grad_sq"]
        else:
            gsum = schedule.cumulative(T)
            g2sum = math.fsum(schedule(t) ** 2 for t in range(T))
            bound = (f0 - f_best) / (sigma_min * gsum) + lipschitz * second_moment / (2 * sigma_min) * g2sum / gsum
            observed = report["weighted_mean_grad_sq"]
        report["bound"] = bound
        report["bound_slack"] = bound - observed
        report["bound_consistent"] = bound >= observed
        report["bound_note"] = ("constants are sampled lower bounds and the best observed loss "
                                "stands in for the optimum")
    return report


# ---------------------------------------------------------------------------
# finite-difference gradient checks

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    failures: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)


def _rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _central_diff(fn, arr, eps):
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        fp = fn()
        arr[i] = orig - eps
        fm = fn()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


def _failing_coords(name, analytic, numeric, tol, limit=10):
    diff = np.abs(analytic - numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
    bad = np.argwhere(diff / scale > tol)
    return [(name, tuple(int(v) for v in idx), float(analytic[tuple(idx)]), float(numeric[tuple(idx)]))
            for idx in bad[:limit]]


def grad_check(target, rng, tolerance=1e-6, eps=1e-5, batch=3, x=None, y=None, upstream=None):
    """Compare analytic gradients with central differences.

    ``target`` is a :class:`Layer` (checked through <forward(x), upstream>) or
    a :class:`Network` (checked through its loss). Relative error is
    ||analytic - numeric|| / max(||analytic||, ||numeric||) per tensor.
    """
    if isinstance(target, Layer):
        if x is None:
            x = rng.normal((batch, *target.in_shape))
            # keep relu inputs away from the kink
            x = np.where(np.abs(x) < 1e-2, 0.5, x)
        if upstream is None:
            upstream = rng.normal((x.shape[0], *target.out_shape))
        grads, dx = target.backward(x, upstream)

        def objective():
            return float(np.vdot(target.forward(x), upstream))

        analytic = {f"param{i}": g for i, g in enumerate(grads)}
        analytic["input"] = dx
        tensors = {f"param{i}": p for i, p in enumerate(target.params)}
        tensors["input"] = x
    elif isinstance(target, Network):
        if x is None:
            x = rng.normal((batch, *target.in_shape))
        if y is None:
            if target.loss.kind == "softmax_cross_entropy":
                y = rng.integers(0, target.loss.num_classes, batch)
            else:
                y = rng.normal((batch, *target.out_shape))
        _, grads = full_gradient(target, x, y)

        def objective():
            return target.loss.forward(target.forward(x), y)

        analytic = {f"param{i}": g for i, g in enumerate(grads)}
        tensors = {f"param{i}": p for i, p in enumerate(target.params())}
    else:
        raise TypeError("grad_check expects a Layer or a Network")

    errors, failures = {}, []
    for name, arr in tensors.items():
        numeric = _central_diff(objective, arr, eps)
        errors[name] = _rel_error(analytic[name], numeric)
        if errors[name] >= tolerance:
            failures += _failing_coords(name, analytic[name], numeric, tolerance)
    worst = max(errors.values(), default=0.0)
    return GradCheckReport(worst, worst < tolerance, tolerance, failures, errors)

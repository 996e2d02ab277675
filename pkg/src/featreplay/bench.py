"""Benchmarks: numba vs numpy kernels, and lockstep vs parallel module backward.

    python -m featreplay.bench [--quick]
"""
import argparse
import os
import time

import numpy as np

from . import _backend, _kernels_numpy
from .engine import FRTrainer
from .layers import Loss
from .network import build_network, mlp_architecture, partition
from .optim import Optimizer, StepSchedule
from .tensor import Rng


def _best_of(fn, repeats):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return min(times)


def kernel_benchmarks(repeats=5, quick=False):
    try:
        compiled = _backend.get_kernels("numba")
    except ImportError:
        compiled = None
    rng = Rng(0)
    m, k, n = (64, 128, 64) if quick else (128, 512, 256)
    a, b = rng.normal((m, k)), rng.normal((k, n))
    xp = rng.normal((8 if quick else 32, 8, 18, 18))
    w = rng.normal((16, 8, 3, 3))
    bias = rng.normal(16)
    up = rng.normal((xp.shape[0], 16, 16, 16))
    cases = {
        f"matmul {m}x{k}x{n}": lambda K: K.matmul(a, b),
        f"conv2d_forward {xp.shape}": lambda K: K.conv2d_forward(xp, w, bias, 1),
        "conv2d_backward_weight": lambda K: K.conv2d_backward_weight(xp, up, 3, 3, 1),
        "conv2d_backward_input": lambda K: K.conv2d_backward_input(w, up, xp.shape, 1),
    }
    rows = []
    for name, fn in cases.items():
        t_np = _best_of(lambda: fn(_kernels_numpy), repeats)
        row = {"kernel": name, "numpy_s": t_np, "numba_s": None, "speedup": None, "max_abs_diff": None}
        if compiled is not None:
            t_nb = _best_of(lambda: fn(compiled), repeats)
            row.update(numba_s=t_nb, speedup=t_np / t_nb,
                       max_abs_diff=float(np.max(np.abs(fn(compiled) - fn(_kernels_numpy)))))
        rows.append(row)
    return rows


def backward_benchmark(iterations=20, width=512, depth=8, K=4, batch=128, seed=0):
    """Time the module backward phase of a wide MLP in lockstep and parallel mode.

    Returns timings plus whether the two runs produced bit-identical losses and weights.
    """
    rng = Rng(seed, 9)
    x = rng.normal((batch, width))
    y = rng.integers(0, 10, batch)
    results = {}
    for lockstep in (True, False):
        net = build_network((width,), mlp_architecture(width, 10, depth),
                            Loss("softmax_cross_entropy", 10), seed=seed)
        part = partition(net, K=K, mode="param")
        opt = Optimizer(net.params(), "sgd_momentum", momentum=0.9,
                        schedule=StepSchedule("fixed", 0.01))
        with FRTrainer(net, part, opt, lockstep=lockstep) as tr:
            tr.step(x, y)  # JIT warm-up
            tr.backward_seconds = 0.0
            losses = [tr.step(x, y) for _ in range(iterations)]
            results[lockstep] = (tr.backward_seconds, losses, [p.copy() for p in net.params()])
    lock, par = results[True], results[False]
    identical = lock[1] == par[1] and all(np.array_equal(a, b) for a, b in zip(lock[2], par[2]))
    return {"lockstep_backward_s": lock[0], "parallel_backward_s": par[0],
            "speedup": lock[0] / par[0], "bit_identical": identical, "cpus": os.cpu_count(),
            "K": K, "width": width, "depth": depth}


def main(repeats=5, quick=False):
    print(f"active backend: {_backend.BACKEND}")
    print(f"{'kernel':40s} {'numpy [s]':>11s} {'numba [s]':>11s} {'speedup':>8s} {'max|diff|':>10s}")
    for r in kernel_benchmarks(repeats, quick):
        nb = "-" if r["numba_s"] is None else f"{r['numba_s']:.5f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        diff = "-" if r["max_abs_diff"] is None else f"{r['max_abs_diff']:.1e}"
        print(f"{r['kernel']:40s} {r['numpy_s']:11.5f} {nb:>11s} {sp:>8s} {diff:>10s}")
    b = backward_benchmark(iterations=5 if quick else 20, width=256 if quick else 512)
    print(f"\nFR backward phase, K={b['K']}, width {b['width']}, {b['cpus']} cpu(s): "
          f"lockstep {b['lockstep_backward_s']:.3f}s, parallel {b['parallel_backward_s']:.3f}s, "
          f"ratio {b['speedup']:.2f}x, bit-identical: {b['bit_identical']}")
    return 0 if b["bit_identical"] else 1


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--quick", action="store_true")
    a = p.parse_args()
    raise SystemExit(main(a.repeats, a.quick))

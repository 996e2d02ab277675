"""Time numba vs numpy kernels and lockstep vs parallel FR backward.

    python benchmarks/bench_kernels.py [--quick] [--repeats N]
"""
import argparse

from featreplay.bench import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--quick", action="store_true")
    a = p.parse_args()
    raise SystemExit(main(a.repeats, a.quick))

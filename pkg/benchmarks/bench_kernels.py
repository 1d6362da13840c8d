"""Compare the compiled kernels against the numpy reference.

Run:  python benchmarks/bench_kernels.py [--repeat 30]

Each kernel is timed on a workload shaped like one cnn-small training batch.
The two backends are bit-identical (see tests/test_kernels.py); the only
question here is speed.
"""
import argparse
import time

import numpy as np

from adq._kernels import numpy_ref

try:
    from adq._kernels import _core
except ImportError:
    _core = None


def bench(fn, args, repeat):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def workloads():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (128, 32, 11, 11)).astype(np.float32)
    cols = rng.normal(0, 1, (128 * 9 * 9, 32 * 9)).astype(np.float32)
    levels = np.sort(rng.normal(0, 1, 15)).astype(np.float32)
    w = rng.normal(0, 1, 64 * 32 * 9).astype(np.float32)
    acts = rng.normal(0, 2, 128 * 32 * 81).astype(np.float32)
    g = rng.normal(0, 1, acts.size).astype(np.float32)
    yield "im2col", (x, 3, 1)
    yield "col2im", (cols, 128, 32, 11, 11, 3, 1)
    yield "assign_nearest", (w, levels)
    yield "act_forward_levels", (acts, levels)
    yield "act_backward_elems", (g, acts, levels, 0.5)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()

    if _core is None:
        print("compiled extension not built; showing numpy timings only")
    print(f"{'kernel':<22}{'numpy':>12}{'compiled':>12}{'speedup':>10}")
    for name, wargs in workloads():
        t_np = bench(getattr(numpy_ref, name), wargs, args.repeat)
        if _core is not None:
            t_c = bench(getattr(_core, name), wargs, args.repeat)
            print(f"{name:<22}{t_np * 1e3:>10.3f}ms{t_c * 1e3:>10.3f}ms"
                  f"{t_np / t_c:>9.2f}x")
        else:
            print(f"{name:<22}{t_np * 1e3:>10.3f}ms{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()

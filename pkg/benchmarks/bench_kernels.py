"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Timings are informative only; both backends must agree bit for bit,
which is checked before anything is timed.
"""

import argparse
import time

import numpy as np

from qarvd._kernels import get_backend


def _cases(rng):
    a = rng.standard_normal((64, 256))
    b = rng.standard_normal((256, 64))
    xq = rng.integers(-128, 128, (64, 256)).astype(np.int8)
    wq = rng.integers(-7, 8, (64, 256)).astype(np.int8)
    w = rng.standard_normal((256, 1024))
    return {
        "matmul_strict 64x256x64": ("matmul_strict", (a, b)),
        "int_gemm_groups 64x256x64": ("int_gemm_groups", (xq, wq, 32)),
        "channel_l2_norms 256x1024": ("channel_l2_norms", (w,)),
    }


def _time(fn, args, repeat):
    fn(*args)  # compile / warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    nb, npy = get_backend("numba"), get_backend("numpy")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for label, (name, inputs) in _cases(rng).items():
        f_nb, f_np = getattr(nb, name), getattr(npy, name)
        if not np.array_equal(f_nb(*inputs), f_np(*inputs)):
            raise SystemExit(f"{label}: backends disagree")
        t_nb, t_np = _time(f_nb, inputs, args.repeat), _time(f_np, inputs, args.repeat)
        print(f"{label:<28}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()

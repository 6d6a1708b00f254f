"""Compare the jitted and pure-numpy convolution backends.

Run:  python benchmarks/bench_kernels.py
The active backend follows REFCOMP_BACKEND (numba unless set to numpy);
both implementations are timed regardless of which one is active.
"""

import time

import numpy as np

from refcomp import kernels


def time_call(fn, *args, repeats=30):
    fn(*args)  # warm-up / JIT
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats * 1000.0


def main():
    print(f"active backend: {kernels.BACKEND}")
    header = (f"{'case':<26} {'MMAC':>6} | {'fwd jit':>8} {'fwd np':>8} | "
              f"{'gradk jit':>9} {'gradk np':>8}")
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    cases = [
        ("batch4 c32 16x16 -> 32", (4, 32, 16, 32)),
        ("batch4 c64 8x8 -> 64", (4, 64, 8, 64)),
        ("batch4 c7 32x32 -> 32", (4, 7, 32, 32)),
        ("batch8 c32 16x16 -> 32", (8, 32, 16, 32)),
        ("batch8 c64 8x8 -> 64", (8, 64, 8, 64)),
        ("batch16 c64 16x16 -> 64", (16, 64, 16, 64)),
    ]
    jit_available = kernels.BACKEND == "numba"
    for label, (n, c, h, o) in cases:
        x = rng.normal(size=(n, c, h, h)).astype(np.float32)
        w = rng.normal(size=(o, c, 3, 3)).astype(np.float32)
        g = rng.normal(size=(n, o, h, h)).astype(np.float32)
        macs = n * o * c * 9 * h * h / 1e6
        fwd_np = time_call(kernels.conv2d_forward_numpy, x, w)
        gk_np = time_call(kernels.conv2d_grad_kernels_numpy, x, g)
        if jit_available:
            fwd_jit = time_call(kernels.conv2d_forward, x, w)
            gk_jit = time_call(kernels.conv2d_grad_kernels, x, g)
            ref = kernels.conv2d_forward_numpy(x, w)
            got = kernels.conv2d_forward(x, w)
            assert np.abs(got - ref).max() < 1e-3 * max(np.abs(ref).max(), 1.0)
            print(f"{label:<26} {macs:6.0f} | {fwd_jit:8.2f} {fwd_np:8.2f} | "
                  f"{gk_jit:9.2f} {gk_np:8.2f}")
        else:
            print(f"{label:<26} {macs:6.0f} | {'-':>8} {fwd_np:8.2f} | "
                  f"{'-':>9} {gk_np:8.2f}")
    print("\nmilliseconds per call; pick the faster backend for your machine "
          "with REFCOMP_BACKEND=numba|numpy")


if __name__ == "__main__":
    main()

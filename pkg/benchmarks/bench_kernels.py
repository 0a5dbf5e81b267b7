#!/usr/bin/env python3
"""Head-to-head timing of the compiled kernel core vs the numpy fallback.

Covers the hot kernels (convolution forward/backward, gradient magnitude,
nearest upsampling) at the shapes the enhancement pipeline actually runs,
plus the end-to-end periodic-disturbance enhancement of a 256x256 scene
under each backend.  Prints one table row per case.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import importlib
import os
import time

import numpy as np

from wafertex import _kernels_py

try:
    from wafertex import _native
except ImportError:
    _native = None


def best_of(fn, repeat):
    fn()  # warmup
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases():
    gen = np.random.default_rng(0)

    def f32(*shape):
        return gen.standard_normal(shape).astype(np.float32)

    x_wide = f32(4, 256, 256)
    w_local = f32(8, 4, 3, 3)
    w_dilated = f32(8, 4, 3, 3)
    x_deep = f32(64, 64, 64)
    w_deep = f32(64, 64, 3, 3)
    w_point = f32(16, 4, 1, 1)
    field = f32(256, 256)
    grad = f32(8, 256, 256)

    return [
        ("conv 3x3 4->8 @256^2", "conv2d_forward", (x_wide, w_local, 1, 1, 1, 1)),
        ("conv 3x3 dil2 4->8 @256^2", "conv2d_forward", (x_wide, w_dilated, 1, 2, 2, 1)),
        ("conv 1x1 4->16 @256^2", "conv2d_forward", (x_wide, w_point, 1, 0, 1, 1)),
        ("conv 3x3 64->64 @64^2", "conv2d_forward", (x_deep, w_deep, 1, 1, 1, 1)),
        ("conv input-grad 8->4 @256^2", "conv2d_input_grad",
         (grad, w_local, 1, 1, 1, 1, 256, 256)),
        ("sobel magnitude @256^2", "grad_magnitude", (field, "sobel")),
        ("upsample x4 @256^2", "upsample_nearest", (x_wide, 4)),
    ]


def bench_kernels(repeat):
    print(f"{'case':34} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for name, fn_name, args in kernel_cases():
        py_t = best_of(lambda: getattr(_kernels_py, fn_name)(*args), repeat)
        if _native is None:
            print(f"{name:34} {py_t * 1e3:9.2f}ms {'n/a':>10} {'':>8}")
            continue
        nat_t = best_of(lambda: getattr(_native, fn_name)(*args), repeat)
        print(f"{name:34} {py_t * 1e3:9.2f}ms {nat_t * 1e3:9.2f}ms {py_t / nat_t:7.1f}x")


def bench_end_to_end(repeat):
    from wafertex import backend
    from wafertex.mptce import MptceConfig, mptce_enhance
    from wafertex.muse import MuseBlock, muse_forward
    from wafertex.synthgen import gen_scene, standard_suite
    from wafertex.tensor import Tensor

    scene = standard_suite()[40]
    img, _, _ = gen_scene(scene)
    cfg = MptceConfig()
    block = MuseBlock.seeded(32, 64, seed=0)
    feat = Tensor.random_uniform(32, 64, 64, seed=1)

    cases = [
        ("enhance 1x256x256", lambda: mptce_enhance(img, cfg)),
        ("muse 32->64 @64^2", lambda: muse_forward(feat, block)),
    ]
    results = []
    for choice in ("python", "compiled"):
        if choice == "compiled" and _native is None:
            continue
        os.environ["WAFERTEX_KERNELS"] = choice
        importlib.reload(backend)
        for name, fn in cases:
            results.append((name, choice, best_of(fn, repeat)))
    os.environ.pop("WAFERTEX_KERNELS", None)
    importlib.reload(backend)

    print()
    for name, choice, t in sorted(results):
        print(f"{name:24} [{choice:8}] {t * 1e3:9.2f}ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _native is None:
        print("compiled core not built; showing numpy fallback only\n")
    bench_kernels(args.repeat)
    bench_end_to_end(args.repeat)


if __name__ == "__main__":
    main()

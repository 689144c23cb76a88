#!/usr/bin/env python3
"""Benchmark the compiled direct-loop kernels against the pure-NumPy
im2col fallback on the network's real layer shapes, and cross-check that
both backends agree.

    python benchmarks/bench_kernels.py [--batch 8] [--repeats 3]
"""

import argparse
import time

import numpy as np

from pconet import tensor
from pconet.model import build_pconet
from pconet.optim import bce_loss

CONV_SHAPES = [
    ("conv_1", (224, 224, 3), 32),
    ("conv_2", (111, 111, 32), 32),
    ("conv_3", (54, 54, 32), 64),
    ("conv_4", (26, 26, 64), 64),
    ("conv_5", (12, 12, 64), 128),
]


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_flops(batch, hw_c, cout):
    h, w, c = hw_c
    return 2 * batch * (h - 2) * (w - 2) * cout * 9 * c


def bench_convs(batch, repeats):
    rng = np.random.default_rng(0)
    print(f"\nconvolution layers (batch {batch}, forward + backward, best of {repeats}):")
    print(f"{'layer':<8} {'shape':<16} " + "".join(f"{b:>22}" for b in tensor.available_backends()))
    for name, hw_c, cout in CONV_SHAPES:
        x = rng.random((batch, *hw_c), dtype=np.float32)
        k = (rng.random((3, 3, hw_c[2], cout), dtype=np.float32) - 0.5) * 0.1
        bias = np.zeros(cout, dtype=np.float32)
        gout_shape = (batch, hw_c[0] - 2, hw_c[1] - 2, cout)
        gout = rng.random(gout_shape, dtype=np.float32)
        gflop = conv_flops(batch, hw_c, cout) / 1e9
        cells = []
        for backend in tensor.available_backends():
            tensor.set_backend(backend)
            fwd = timeit(lambda: tensor.conv2d_forward(x, k, bias), repeats)
            bwd = timeit(lambda: tensor.conv2d_backward(x, k, gout), repeats)
            cells.append(f"{fwd * 1e3:7.1f}+{bwd * 1e3:7.1f}ms")
        print(f"{name:<8} {str(hw_c):<16} " + "".join(f"{c:>22}" for c in cells)
              + f"   ({gflop:.2f} GF fwd)")


def bench_model_step(batch, repeats):
    rng = np.random.default_rng(1)
    x = rng.random((batch, 224, 224, 3), dtype=np.float32)
    y = np.eye(2, dtype=np.float32)[rng.integers(0, 2, size=batch)]
    print(f"\nfull model train step (batch {batch}):")
    for backend in tensor.available_backends():
        tensor.set_backend(backend)
        model = build_pconet(seed=0)

        def step():
            probs = model.forward(x, training=True)
            _, dprobs = bce_loss(probs, y)
            model.zero_grads()
            model.backward(dprobs)

        t = timeit(step, repeats)
        fwd = timeit(lambda: model.forward(x, training=False), repeats)
        print(f"  {backend:<8} fwd+bwd {t:6.3f}s   eval fwd {fwd:6.3f}s")


def check_agreement(batch):
    if len(tensor.available_backends()) < 2:
        print("\nonly one backend built; skipping agreement check")
        return
    rng = np.random.default_rng(2)
    worst = 0.0
    for _, hw_c, cout in CONV_SHAPES[:3]:
        x = rng.random((batch, *hw_c), dtype=np.float32)
        k = (rng.random((3, 3, hw_c[2], cout), dtype=np.float32) - 0.5) * 0.1
        bias = rng.random(cout, dtype=np.float32)
        gout = rng.random((batch, hw_c[0] - 2, hw_c[1] - 2, cout), dtype=np.float32)
        outs = {}
        for backend in tensor.available_backends():
            tensor.set_backend(backend)
            outs[backend] = (
                tensor.conv2d_forward(x, k, bias),
                *tensor.conv2d_backward(x, k, gout),
            )
        for a, b in zip(outs["cython"], outs["numpy"]):
            denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
            worst = max(worst, float(np.abs(a - b).max() / denom))
    print(f"\ncross-backend max relative difference: {worst:.2e} (required < 1e-5)")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    print(f"backends available: {tensor.available_backends()} "
          f"(default {tensor.get_backend()}), threads {tensor.get_num_threads()}")
    default = tensor.get_backend()
    try:
        bench_convs(args.batch, args.repeats)
        bench_model_step(args.batch, args.repeats)
        check_agreement(min(args.batch, 4))
    finally:
        tensor.set_backend(default)


if __name__ == "__main__":
    main()

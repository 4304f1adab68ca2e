"""Time the compiled kernels against the numpy fallback on search-sized tensors.

    python benchmarks/bench_kernels.py [--repeats 20]
"""

import argparse
import timeit

import numpy as np

from ctnas.core import kernels


def cases(rng):
    x = rng.standard_normal((32, 8, 8, 400)).astype(np.float32)
    w = rng.standard_normal((8, 3, 1)).astype(np.float32)
    w17 = rng.standard_normal((8, 1, 7)).astype(np.float32)
    g = rng.standard_normal((32, 8, 8, 400)).astype(np.float32)
    _, arg = kernels.module("python").maxpool_forward(x, (3, 3), (1, 1), (1, 1), (8, 400))
    return {
        "depthwise 3x1 forward": lambda k: k.depthwise_forward(x, w, (1, 1), (1, 1), (1, 0), (8, 400)),
        "depthwise 1x7 dil 2 forward": lambda k: k.depthwise_forward(x, w17, (1, 1), (1, 2), (0, 6), (8, 400)),
        "depthwise 3x1 backward": lambda k: k.depthwise_backward(x, w, g, (1, 1), (1, 1), (1, 0)),
        "maxpool 3x3 forward": lambda k: k.maxpool_forward(x, (3, 3), (1, 1), (1, 1), (8, 400)),
        "maxpool 3x3 backward": lambda k: k.maxpool_backward(g, arg, x.shape, (3, 3), (1, 1), (1, 1)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if not kernels.has_compiled():
        raise SystemExit("compiled kernels are not built; run `pip install --no-build-isolation -e .` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        times = {}
        for backend in ("python", "compiled"):
            mod = kernels.module(backend)
            fn(mod)
            times[backend] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:32s} {times['python']:10.2f} {times['compiled']:12.2f} "
              f"{times['python'] / times['compiled']:7.1f}x")


if __name__ == "__main__":
    main()

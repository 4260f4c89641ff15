"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 20]

Shapes are the ones the model and sampler actually use: 16³ heatmaps for
NMS, smoothing and trilinear lookups, and decoder-sized conv windows.
"""
import argparse
import timeit

import numpy as np

from charpose import kernels


def cases(rng):
    grid = rng.random((16, 16, 16))
    coords = rng.uniform(-1, 16, (25, 3))
    x3 = rng.standard_normal((24, 10, 10, 10, 4))     # padded 8³ input, 3x3x3 conv
    cols3 = kernels.backends()["python"].unfold3d(x3, 3, 1, 8)
    xt = rng.standard_normal((24, 18, 18, 18, 4))     # stride-2 transposed conv, 8³ -> 16³
    colst = kernels.backends()["python"].unfold3d(xt, 4, 2, 8)
    return {
        "nms3d 16^3": lambda k: k.nms3d(grid),
        "box_smooth3d 16^3": lambda k: k.box_smooth3d(grid),
        "trilinear 25 pts": lambda k: k.trilinear(grid, coords),
        "unfold3d k3 s1 8^3x24": lambda k: k.unfold3d(x3, 3, 1, 8),
        "fold3d k3 s1 8^3x24": lambda k: k.fold3d(cols3, 1, 10),
        "unfold3d k4 s2 8^3x24": lambda k: k.unfold3d(xt, 4, 2, 8),
        "fold3d k4 s2 8^3x24": lambda k: k.fold3d(colst, 2, 18),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"active backend: {kernels.BACKEND}")
    names = list(impls)
    print(f"{'kernel':26s}" + "".join(f"{n + ' (ms)':>16s}" for n in names) + f"{'speedup':>10s}")
    for label, fn in cases(np.random.default_rng(0)).items():
        ms = {}
        for n, mod in impls.items():
            t = min(timeit.repeat(lambda: fn(mod), repeat=args.repeat, number=args.number))
            ms[n] = 1e3 * t / args.number
        speed = f"{ms['python'] / ms['cython']:9.1f}x" if "cython" in ms else ""
        print(f"{label:26s}" + "".join(f"{ms[n]:16.3f}" for n in names) + speed)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Shift sensitivity of the three downsampling layers on 1/f ("pink") noise.

For each seed the relative change of the pooled feature-map norm under a
one-pixel circular shift is measured, along with the raw L2 difference
between the pooled outputs (which also reflects the output grid moving by
half a sample and so does not isolate aliasing).

    python3 scripts/shift_consistency.py [--seeds 100] [--size 32]
"""
import argparse

import numpy as np

from aabcos.pooling import blurpool, flcpool, strided_reduce
from aabcos.tensor import Tensor

POOLS = {"strided": strided_reduce, "blurpool": blurpool, "flc": flcpool}


def pink_noise(seed, n):
    rng = np.random.default_rng(seed)
    f = np.sqrt(np.fft.fftfreq(n)[:, None] ** 2 + np.fft.fftfreq(n)[None, :] ** 2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / f
    return np.fft.ifft2(spec).real


def pooled(pool, x):
    return pool(Tensor(x[None, None], dtype=np.float64)).data[0, 0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()

    print(f"{'pool':9s} {'norm change':>12s} {'L2 diff':>10s}")
    for name, pool in POOLS.items():
        norm_change, l2 = [], []
        for seed in range(args.seeds):
            x = pink_noise(seed, args.size)
            base = pooled(pool, x)
            for axis in (0, 1):
                moved = pooled(pool, np.roll(x, 1, axis=axis))
                norm_change.append(abs(np.linalg.norm(moved) - np.linalg.norm(base)) / np.linalg.norm(base))
                l2.append(np.linalg.norm(moved - base) / np.linalg.norm(base))
        print(f"{name:9s} {np.mean(norm_change):12.3e} {np.mean(l2):10.3f}")


if __name__ == "__main__":
    main()

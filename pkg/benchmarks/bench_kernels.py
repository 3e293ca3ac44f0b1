"""Time the numba and numpy mask kernels on the same random volume.

Usage::

    python3 benchmarks/bench_kernels.py [--size 96] [--repeat 3]

Each kernel is warmed up once per backend (so numba compile time is
excluded), then timed as the best of ``--repeat`` runs. The outputs of the
two backends are checked for equality.
"""
import argparse
import time

import numpy as np

from nodkit.maskops import (BinaryMask, Connectivity, connected_components, distance_transform,
                            morph_binary)
from nodkit.volio import VolumeMeta


def _best_time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n = args.size
    bits = rng.random((n, n, n)) < 0.3
    mask = BinaryMask(VolumeMeta((n, n, n), (0.7, 0.7, 1.25)), bits)
    sparse = mask.replace(rng.random((n, n, n)) < 0.01)

    cases = {
        "dilate (26-conn)": lambda b: morph_binary(mask, "dilate", Connectivity.FULL, backend=b).bits,
        "erode (26-conn)": lambda b: morph_binary(mask, "erode", Connectivity.FULL, backend=b).bits,
        "label (6-conn)": lambda b: connected_components(mask, Connectivity.FACE, backend=b).labels,
        "edt": lambda b: distance_transform(sparse, backend=b),
    }
    print(f"volume {n}^3, best of {args.repeat}")
    print(f"{'kernel':<18}{'numba s':>10}{'numpy s':>10}{'speedup':>10}  agree")
    for name, fn in cases.items():
        t_nb = _best_time(lambda: fn("numba"), args.repeat)
        t_np = _best_time(lambda: fn("numpy"), args.repeat)
        agree = np.array_equal(fn("numba"), fn("numpy"))
        print(f"{name:<18}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()

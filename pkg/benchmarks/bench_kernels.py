"""Time every hot kernel on both backends at desk-scale sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Numba timings exclude compilation (one warm-up call per kernel).
"""

import argparse
import timeit

import numpy as np

from congrobust import kernels
from congrobust.layout import synth_layout


def workloads(seed=0):
    lay = synth_layout(seed, n_cells=2000, n_nets=3000, W=32, H=32, n_macros=2)
    px, py = (np.ascontiguousarray(a) for a in lay.pin_positions())
    ptr = lay.netlist.net_ptr
    W, H = lay.grid.W, lay.grid.H
    gx, gy = lay.pin_tiles()
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(W, H))
    # one FCN layer's worth of im2col traffic: batch 5, 34 x 34 padded, 8 channels, 3 x 3 kernel
    xp = rng.normal(size=(5, 34, 34, 8))
    cols = rng.normal(size=(5 * 32 * 32, 9 * 8))
    return {
        "tile_index": lambda k: k.tile_index(px, W),
        "net_bboxes": lambda k: k.net_bboxes(px, py, ptr),
        "rudy_maps": lambda k: k.rudy_maps(px, py, ptr, W, H),
        "rudy_vjp": lambda k: k.rudy_vjp(px, py, ptr, W, H, g, g),
        "route_demand": lambda k: k.route_demand(gx, gy, ptr, W, H),
        "im2col": lambda k: k.im2col(xp, 3, 1, 32, 32),
        "col2im": lambda k: k.col2im(cols, 5, 34, 34, 8, 3, 1, 32, 32),
    }


def bench(repeat=5):
    work = workloads()
    backends = {"numpy": kernels.backend("numpy")}
    if kernels.NUMBA_AVAILABLE:
        backends["numba"] = kernels.backend("numba")
    rows = []
    for name in kernels.KERNELS:
        fn = work[name]
        times = {}
        for bname, mod in backends.items():
            fn(mod)  # warm-up / compile
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times[bname] = min(t.repeat(repeat, n)) / n
        rows.append((name, times))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    print(f"{'kernel':14s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t in rows:
        nb = t.get("numba")
        print(f"{name:14s} {t['numpy'] * 1e3:10.3f} "
              + (f"{nb * 1e3:10.3f} {t['numpy'] / nb:8.1f}x" if nb else f"{'-':>10s} {'-':>8s}"))


if __name__ == "__main__":
    main()

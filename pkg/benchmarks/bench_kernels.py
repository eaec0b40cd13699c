"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N]

Times each simulator kernel on both backends, checks their outputs are
bit-identical, and finishes with an end-to-end episode simulation.
"""
import argparse
import timeit

import numpy as np

from vertikit import _kernels_py

try:
    from vertikit import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    grid = rng.random((161, 241))
    rows = rng.uniform(0, 160, 4)
    cols = rng.uniform(0, 240, 4)
    lattice = rng.random((10, 14))
    return {
        "bilinear_sample (4 contacts)": lambda k: k.bilinear_sample(grid, rows, cols),
        "sample_patch (40x40)": lambda k: k.sample_patch(grid, 0.0, 0.0, 0.025, 3.0, 2.0, 0.8, 0.6, 40, 0.01875),
        "lattice_upsample (161x241)": lambda k: k.lattice_upsample(lattice, 161, 241, 20.0),
    }


def bench(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'python (us)':>12} {'compiled (us)':>14} {'speedup':>8}  identical")
    for name, call in cases(rng).items():
        t_py = bench(lambda: call(_kernels_py), args.repeat)
        if _kernels is None:
            print(f"{name:<30} {t_py * 1e6:>12.2f}")
            continue
        t_c = bench(lambda: call(_kernels), args.repeat)
        same = np.array_equal(np.asarray(call(_kernels_py)), np.asarray(call(_kernels)))
        print(f"{name:<30} {t_py * 1e6:>12.2f} {t_c * 1e6:>14.2f} {t_py / t_c:>7.1f}x  {same}")

    # end to end: one 120-step episode, which is dominated by patch extraction and contact sampling
    import subprocess
    import sys
    code = ("import time; from vertikit.dataset import DataConfig, simulate_episode; "
            "from vertikit.terrain import generate_terrain, TerrainConfig, VehicleConfig; "
            "from vertikit import kernels; h = generate_terrain(3, TerrainConfig()); t = time.perf_counter(); "
            "[simulate_episode(h, 3, i, 0, DataConfig(), VehicleConfig()) for i in range(5)]; "
            "print(kernels.BACKEND, (time.perf_counter() - t) / 5)")
    for env in ({"VERTIKIT_PURE_PYTHON": "1"}, {"VERTIKIT_PURE_PYTHON": "0"}):
        import os
        out = subprocess.run([sys.executable, "-c", code], env={**os.environ, **env}, capture_output=True, text=True)
        if out.returncode:
            print(out.stderr.strip().splitlines()[-1])
            continue
        backend, secs = out.stdout.split()
        print(f"episode simulation [{backend}]: {float(secs) * 1e3:.1f} ms per episode")


if __name__ == "__main__":
    main()

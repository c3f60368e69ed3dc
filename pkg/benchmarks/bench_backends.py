"""Compare the numba and numpy backends on the hot kernels.

Usage: python benchmarks/bench_backends.py [--paths N] [--steps M]

Times path simulation and the first-variation reductions for the 1-D
multiplicative model and a degenerate 2-asset model, once per backend.
The first numba call includes JIT compilation and is reported separately.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))


def timed(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--paths", type=int, default=50_000)
    parser.add_argument("--steps", type=int, default=256)
    args = parser.parse_args()

    results = {}
    for backend in ("numpy", "numba"):
        os.environ["DEGENHEDGE_BACKEND"] = backend
        from degenhedge._backend import HAVE_NUMBA

        if backend == "numba" and not HAVE_NUMBA:
            print("numba not installed; skipping numba backend")
            continue
        from degenhedge.engine import fv_reductions, resolve_grid, simulate_paths
        from degenhedge.model import parse_model_dict

        model_1d = parse_model_dict(
            {
                "model": {"n": 1, "d": 1, "horizon": 1.0, "x0": [100.0]},
                "rate": {"table": [{"t_start": 0.0, "value": 0.03}]},
                "drift": {"family": "linear-in-state", "params": {"rates": [0.08]}},
                "vol": {"family": "linear-in-state", "params": {"matrix": [[0.2]]}},
            }
        )
        model_2d = parse_model_dict(
            {
                "model": {"n": 2, "d": 2, "horizon": 1.0, "x0": [100.0, 100.0]},
                "rate": {"table": [{"t_start": 0.0, "value": 0.03}]},
                "drift": {"family": "linear-in-state", "params": {"rates": [0.07, 0.054]}},
                "vol": {"family": "linear-in-state", "params": {"matrix": [[0.2, 0.1], [0.12, 0.06]]}},
            }
        )
        grid1 = resolve_grid(model_1d, args.steps)
        grid2 = resolve_grid(model_2d, args.steps)

        if backend == "numba":
            start = time.perf_counter()
            simulate_paths(model_1d, grid1, 16, seed=0)  # trigger JIT
            results["numba jit warmup"] = time.perf_counter() - start

        results[f"{backend} simulate 1-D"] = timed(
            lambda: simulate_paths(model_1d, grid1, args.paths, seed=1)
        )
        results[f"{backend} simulate 2-D"] = timed(
            lambda: simulate_paths(model_2d, grid2, args.paths, seed=1)
        )
        bundle = simulate_paths(model_2d, grid2, args.paths, seed=1)
        results[f"{backend} fv reductions 2-D"] = timed(
            lambda: fv_reductions(model_2d, bundle, row1=0, row2=1, want_avg=True)
        )

    width = max(len(k) for k in results)
    print(f"\npaths={args.paths} steps={args.steps}")
    for k, v in results.items():
        print(f"{k.ljust(width)}  {v * 1000:9.1f} ms")
    for kernel in ("simulate 1-D", "simulate 2-D", "fv reductions 2-D"):
        a, b = results.get(f"numpy {kernel}"), results.get(f"numba {kernel}")
        if a and b:
            print(f"speedup {kernel}: {a / b:.2f}x")


if __name__ == "__main__":
    main()

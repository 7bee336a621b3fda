"""Time the compiled and numpy kernel backends on training-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from ptadapt import kernels
from ptadapt.clustering import cosine_distance_matrix


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    costs = {n: np.ascontiguousarray(rng.random((n, n))) for n in (8, 32, 128)}
    feats = {n: rng.normal(size=(n, 16)) for n in (64, 512)}
    dists = {n: np.ascontiguousarray(cosine_distance_matrix(f, f)) for n, f in feats.items()}
    nns = {n: np.ascontiguousarray(rng.integers(0, n, size=n).astype(np.intp)) for n in (512, 4096)}
    return costs, dists, nns


def run(repeat=5):
    costs, dists, nns = _inputs()
    cases = []
    for n, c in costs.items():
        cases.append((f"solve_square {n}x{n}", "solve_square", c))
    for n, d in dists.items():
        cases.append((f"nearest_indices n={n}", "nearest_indices", d))
    for n, nn in nns.items():
        cases.append((f"link_components n={n}", "link_components", nn))
    rows = []
    for label, fn, arg in cases:
        times = {}
        for backend in kernels.available_backends():
            f = getattr(kernels.get(backend), fn)
            number = 3
            times[backend] = min(timeit.repeat(lambda: f(arg), number=number, repeat=repeat)) / number
        rows.append((label, times))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"{'case':28s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for label, times in run(args.repeat):
        line = f"{label:28s}" + "".join(f"{times[b] * 1e3:12.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"   {times['python'] / times['cython']:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()

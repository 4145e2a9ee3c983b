"""Compare the compiled and numpy subset-enumeration kernels.

Run: python3 benchmarks/bench_kernels.py [--edges 15] [--instances 20]
"""

import argparse
import time

import numpy as np

from mibkit import _kernels_py, selection


def kernel_args(problem):
    es = problem.edges
    E = len(es)
    need_in = np.array([es.src[i] != es.source for i in range(E)], dtype=np.uint8)
    need_out = np.array([es.dst[i] != es.sink for i in range(E)], dtype=np.uint8)
    in_req = np.array([sum(1 << j for j in es.in_edges(es.src[i])) for i in range(E)], dtype=np.int64)
    out_req = np.array([sum(1 << j for j in es.out_edges(es.dst[i])) for i in range(E)], dtype=np.int64)
    pos = sum(1 << i for i in range(E) if problem.positive()[i])
    return (problem.costs(), need_in, in_req, need_out, out_req, problem.budget, pos,
            problem.n_positive_required())


def bench(fn, cases):
    t = time.perf_counter()
    out = [fn(*a) for a in cases]
    return time.perf_counter() - t, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=15)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    cases = [kernel_args(selection.random_problem(rng, n_edges=args.edges, n_nodes=8))
             for _ in range(args.instances)]
    t_py, out_py = bench(_kernels_py.enumerate_best, cases)
    print(f"numpy    {t_py:8.3f} s  ({args.instances} x 2^{args.edges} masks)")
    if selection.KERNEL != "cython":
        print("compiled kernel not built; install with `pip install -e . --no-build-isolation`")
        return
    t_cy, out_cy = bench(selection._kernels.enumerate_best, cases)
    print(f"cython   {t_cy:8.3f} s  speedup {t_py / t_cy:.1f}x  identical={out_cy == out_py}")


if __name__ == "__main__":
    main()

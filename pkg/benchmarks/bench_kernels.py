#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py

Times both implementations of every dual-path kernel on shapes
representative of desk-scale training (conv stages) and evaluation
(string/tree edit distances), and prints which side the package's
default dispatch uses.  Numba compile time is excluded by a warmup call.
"""

import time

import numpy as np

from tablerec import kernels as K
from tablerec.evaluation import TedsCostModel, _annotate
from tablerec.vocab import parse_table_tree


def timeit(fn, *args, repeat=20):
    fn(*args)  # warmup (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def row(name, t_numba, t_numpy):
    ratio = t_numpy / t_numba if t_numba > 0 else float("inf")
    winner = "numba" if t_numba < t_numpy else "numpy"
    print(f"{name:38s} numba {t_numba * 1e3:9.3f} ms   numpy {t_numpy * 1e3:9.3f} ms"
          f"   ({winner} {max(ratio, 1 / ratio):5.1f}x faster)")


def bench_conv():
    rng = np.random.default_rng(0)
    cases = [
        ("conv fwd 1->32 @162px s2", (1, 162, 162), (32, 1, 3, 3), 2),
        ("conv fwd 32->64 @82px s2", (32, 82, 82), (64, 32, 3, 3), 2),
        ("conv fwd 64->128 @42px s2", (64, 42, 42), (128, 64, 3, 3), 2),
    ]
    for name, xs, ks, s in cases:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        row(name, timeit(K._conv2d_forward_numba, x, k, s, s),
            timeit(K._conv2d_forward_numpy, x, k, s, s))
        out_shape = K._conv2d_forward_numpy(x, k, s, s).shape
        dout = rng.standard_normal(out_shape).astype(np.float32)
        row(name.replace("fwd", "bwd-input"),
            timeit(K._conv2d_backward_input_numba, dout, k, xs[1], xs[2], s, s),
            timeit(K._conv2d_backward_input_numpy, dout, k, xs[1], xs[2], s, s))
        row(name.replace("fwd", "bwd-kernel"),
            timeit(K._conv2d_backward_kernels_numba, dout, x, 3, 3, s, s),
            timeit(K._conv2d_backward_kernels_numpy, dout, x, 3, 3, s, s))


def bench_levenshtein():
    rng = np.random.default_rng(1)
    for n in (12, 80, 300):
        a = rng.integers(0, 40, n).astype(np.int32)
        b = rng.integers(0, 40, n).astype(np.int32)
        row(f"levenshtein n={n}",
            timeit(K._levenshtein_numba, a, b, repeat=200),
            timeit(K._levenshtein_numpy, a, b, repeat=200))


def bench_ted():
    # a realistic mid-size table tree pair
    def table_html(rows, cols):
        body = "".join("<tr>" + "<td>x</td>" * cols + "</tr>" for _ in range(rows))
        return f"<table><tbody>{body}</tbody></table>"

    cost = TedsCostModel()
    for rows, cols in ((6, 6), (12, 8)):
        a = _annotate(parse_table_tree(table_html(rows, cols)))
        b = _annotate(parse_table_tree(table_html(rows + 1, cols - 1)))
        n1, n2 = len(a.nodes), len(b.nodes)
        sub = np.empty((n1, n2))
        for i, na in enumerate(a.nodes):
            for j, nb in enumerate(b.nodes):
                sub[i, j] = cost.substitute(na, nb)
        ones1 = np.ones(n1)
        ones2 = np.ones(n2)
        args = (a.lmds, a.keyroots, b.lmds, b.keyroots, ones1, ones2, sub)
        row(f"ted {n1}x{n2} nodes",
            timeit(K._ted_numba, *args) if K.NUMBA_ENABLED else float("nan"),
            timeit(K._ted_py, *args, repeat=3))


def main():
    print(f"numba enabled: {K.NUMBA_ENABLED} "
          f"(set TABLEREC_DISABLE_NUMBA=1 to force the numpy paths)")
    print(f"dispatch defaults: conv2d -> numpy/BLAS, levenshtein/ted -> "
          f"{'numba' if K.NUMBA_ENABLED else 'numpy'}")
    print()
    bench_conv()
    print()
    bench_levenshtein()
    print()
    bench_ted()


if __name__ == "__main__":
    main()

"""Hot numeric kernels, each with a numba-jitted and a pure-numpy implementation.

Setting the environment variable ``TABLEREC_DISABLE_NUMBA=1`` (checked once
at import) selects the numpy fallbacks for everything; it is also the
automatic behaviour when numba is not importable.  Otherwise each kernel
defaults to whichever implementation measures faster on representative
shapes (see ``benchmarks/bench_kernels.py``): the branchy dynamic programs
(Levenshtein, tree edit distance) go to numba, while conv2d defaults to the
im2col+BLAS numpy path, which beats naive jitted loops by an order of
magnitude on channel-heavy layers.  Both paths compute identical results.

Kernels here take pre-padded inputs and plain ndarrays so they stay free of
any autodiff or tree bookkeeping.  All loops are sequential (no prange) so
results are bit-reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("TABLEREC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _DISABLED = True

NUMBA_ENABLED = not _DISABLED


# ---------------------------------------------------------------------------
# conv2d: cross-correlation over (c, h, w) images, kernels (c_out, c_in, kh, kw)


def conv2d_im2col(xpad, kh, kw, sh, sw):
    """Gather sliding patches into a (c_in*kh*kw, oh*ow) matrix."""
    c_in, hp, wp = xpad.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpad[:, i : i + oh * sh : sh, j : j + ow * sw : sw]
    return cols.reshape(c_in * kh * kw, oh * ow), oh, ow


def conv2d_forward_from_cols(cols, kernels, oh, ow):
    c_out = kernels.shape[0]
    out = kernels.reshape(c_out, -1) @ cols
    return np.ascontiguousarray(out.reshape(c_out, oh, ow))


def conv2d_backward_kernels_from_cols(dout, cols, c_in, kh, kw):
    c_out = dout.shape[0]
    dk = dout.reshape(c_out, -1) @ cols.T
    return np.ascontiguousarray(dk.reshape(c_out, c_in, kh, kw))


def _conv2d_forward_numpy(xpad, kernels, sh, sw):
    _, _, kh, kw = kernels.shape
    cols, oh, ow = conv2d_im2col(xpad, kh, kw, sh, sw)
    return conv2d_forward_from_cols(cols, kernels, oh, ow)


def _conv2d_backward_input_numpy(dout, kernels, hp, wp, sh, sw):
    c_out, oh, ow = dout.shape
    _, c_in, kh, kw = kernels.shape
    dcols = kernels.reshape(c_out, -1).T @ dout.reshape(c_out, -1)
    dcols = dcols.reshape(c_in, kh, kw, oh, ow)
    dxpad = np.zeros((c_in, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxpad[:, i : i + oh * sh : sh, j : j + ow * sw : sw] += dcols[:, i, j]
    return dxpad


def _conv2d_backward_kernels_numpy(dout, xpad, kh, kw, sh, sw):
    c_in = xpad.shape[0]
    cols, _, _ = conv2d_im2col(xpad, kh, kw, sh, sw)
    return conv2d_backward_kernels_from_cols(dout, cols, c_in, kh, kw)


def _conv2d_forward_py(xpad, kernels, sh, sw):
    c_in, hp, wp = xpad.shape
    c_out, _, kh, kw = kernels.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    out = np.zeros((c_out, oh, ow), dtype=xpad.dtype)
    for co in range(c_out):
        for ci in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    kv = kernels[co, ci, i, j]
                    for oy in range(oh):
                        iy = oy * sh + i
                        for ox in range(ow):
                            out[co, oy, ox] += kv * xpad[ci, iy, ox * sw + j]
    return out


def _conv2d_backward_input_py(dout, kernels, hp, wp, sh, sw):
    c_out, oh, ow = dout.shape
    _, c_in, kh, kw = kernels.shape
    dxpad = np.zeros((c_in, hp, wp), dtype=dout.dtype)
    for co in range(c_out):
        for ci in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    kv = kernels[co, ci, i, j]
                    for oy in range(oh):
                        iy = oy * sh + i
                        for ox in range(ow):
                            dxpad[ci, iy, ox * sw + j] += kv * dout[co, oy, ox]
    return dxpad


def _conv2d_backward_kernels_py(dout, xpad, kh, kw, sh, sw):
    c_in = xpad.shape[0]
    c_out, oh, ow = dout.shape
    dk = np.zeros((c_out, c_in, kh, kw), dtype=dout.dtype)
    for co in range(c_out):
        for ci in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for oy in range(oh):
                        iy = oy * sh + i
                        for ox in range(ow):
                            acc += xpad[ci, iy, ox * sw + j] * dout[co, oy, ox]
                    dk[co, ci, i, j] = acc
    return dk


# ---------------------------------------------------------------------------
# Levenshtein distance over integer code sequences


def _levenshtein_numpy(a, b):
    if a.size == 0:
        return int(b.size)
    if b.size == 0:
        return int(a.size)
    idx = np.arange(b.size + 1, dtype=np.int64)
    prev = idx.copy()
    cur = np.empty(b.size + 1, dtype=np.int64)
    for i in range(a.size):
        cur[0] = i + 1
        cur[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i]))
        # fold in the left-to-right insertion chain: cur[j] = min_k<=j cur[k] + (j-k)
        cur = np.minimum.accumulate(cur - idx) + idx
        prev, cur = cur, prev
    return int(prev[-1])


def _levenshtein_py(a, b):
    n = b.size
    prev = np.arange(n + 1, dtype=np.int64)
    cur = np.empty(n + 1, dtype=np.int64)
    for i in range(a.size):
        cur[0] = i + 1
        ai = a[i]
        for j in range(1, n + 1):
            c = prev[j - 1] + (0 if b[j - 1] == ai else 1)
            d = prev[j] + 1
            if d < c:
                c = d
            e = cur[j - 1] + 1
            if e < c:
                c = e
            cur[j] = c
        prev, cur = cur, prev
    return int(prev[-1])


# ---------------------------------------------------------------------------
# Ordered tree edit distance (Zhang-Shasha) over postorder-indexed arrays.
#
# Inputs are the classic ZS preprocessing products: for each tree, nodes are
# numbered in postorder, lmds[i] is the postorder index of node i's leftmost
# descendant, and keyroots are the nodes with no proper ancestor sharing
# their lmd.  Costs are precomputed per node (delete/insert) and per node
# pair (substitute), so the DP itself is branch-free of any tree objects.


def _ted_py(lmds1, keyroots1, lmds2, keyroots2, del_cost, ins_cost, sub_cost):
    n1 = lmds1.size
    n2 = lmds2.size
    td = np.zeros((n1, n2), dtype=np.float64)
    fd = np.zeros((n1 + 1, n2 + 1), dtype=np.float64)
    for i in keyroots1:
        for j in keyroots2:
            m = i - lmds1[i] + 2
            n = j - lmds2[j] + 2
            ioff = lmds1[i] - 1
            joff = lmds2[j] - 1
            fd[0, 0] = 0.0
            for x in range(1, m):
                fd[x, 0] = fd[x - 1, 0] + del_cost[x + ioff]
            for y in range(1, n):
                fd[0, y] = fd[0, y - 1] + ins_cost[y + joff]
            for x in range(1, m):
                for y in range(1, n):
                    if lmds1[i] == lmds1[x + ioff] and lmds2[j] == lmds2[y + joff]:
                        d = min(
                            fd[x - 1, y] + del_cost[x + ioff],
                            fd[x, y - 1] + ins_cost[y + joff],
                            fd[x - 1, y - 1] + sub_cost[x + ioff, y + joff],
                        )
                        fd[x, y] = d
                        td[x + ioff, y + joff] = d
                    else:
                        p = lmds1[x + ioff] - 1 - ioff
                        q = lmds2[y + joff] - 1 - joff
                        fd[x, y] = min(
                            fd[x - 1, y] + del_cost[x + ioff],
                            fd[x, y - 1] + ins_cost[y + joff],
                            fd[p, q] + td[x + ioff, y + joff],
                        )
    return td[n1 - 1, n2 - 1]


if NUMBA_ENABLED:
    _conv2d_forward_numba = njit(cache=True)(_conv2d_forward_py)
    _conv2d_backward_input_numba = njit(cache=True)(_conv2d_backward_input_py)
    _conv2d_backward_kernels_numba = njit(cache=True)(_conv2d_backward_kernels_py)
    _levenshtein_numba = njit(cache=True)(_levenshtein_py)
    _ted_numba = njit(cache=True)(_ted_py)

    levenshtein = _levenshtein_numba
    ted_dp = _ted_numba
else:
    levenshtein = _levenshtein_numpy
    ted_dp = _ted_py

# conv2d stays on the BLAS-backed path in either mode; the jitted loops are
# kept importable for the benchmark and for the env-flagged fallback story.
conv2d_forward = _conv2d_forward_numpy
conv2d_backward_input = _conv2d_backward_input_numpy
conv2d_backward_kernels = _conv2d_backward_kernels_numpy

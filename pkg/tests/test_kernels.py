"""Dual-path kernel equivalence: the jitted and numpy implementations must
agree bit-for-bit on integer DPs and to float tolerance on conv."""

import os
import subprocess
import sys

import numpy as np
import pytest

from tablerec import kernels as K


needs_numba = pytest.mark.skipif(not K.NUMBA_ENABLED, reason="numba disabled")


class TestConvPaths:
    @needs_numba
    @pytest.mark.parametrize("c_in,c_out,size,stride", [(1, 4, 12, 1), (3, 5, 9, 2), (4, 2, 7, 3)])
    def test_forward_agree(self, c_in, c_out, size, stride):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((c_in, size, size))
        k = rng.standard_normal((c_out, c_in, 3, 3))
        a = K._conv2d_forward_numba(x, k, stride, stride)
        b = K._conv2d_forward_numpy(x, k, stride, stride)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    @needs_numba
    def test_backward_agree(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 10, 11))
        k = rng.standard_normal((4, 3, 3, 3))
        out = K._conv2d_forward_numpy(x, k, 2, 2)
        dout = rng.standard_normal(out.shape)
        np.testing.assert_allclose(
            K._conv2d_backward_input_numba(dout, k, 10, 11, 2, 2),
            K._conv2d_backward_input_numpy(dout, k, 10, 11, 2, 2), rtol=1e-10)
        np.testing.assert_allclose(
            K._conv2d_backward_kernels_numba(dout, x, 3, 3, 2, 2),
            K._conv2d_backward_kernels_numpy(dout, x, 3, 3, 2, 2), rtol=1e-10)

    def test_im2col_round_trip_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 6, 6))
        cols, oh, ow = K.conv2d_im2col(x, 1, 1, 1, 1)
        k = np.zeros((2, 2, 1, 1))
        k[0, 0] = k[1, 1] = 1.0
        out = K.conv2d_forward_from_cols(cols, k, oh, ow)
        np.testing.assert_allclose(out, x)


class TestLevenshteinPaths:
    def brute(self, a, b):
        # classic full-matrix DP, small and independent
        m, n = len(a), len(b)
        d = [[0] * (n + 1) for _ in range(m + 1)]
        for i in range(m + 1):
            d[i][0] = i
        for j in range(n + 1):
            d[0][j] = j
        for i in range(1, m + 1):
            for j in range(1, n + 1):
                d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1,
                              d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
        return d[m][n]

    @pytest.mark.parametrize("pair", [("", ""), ("abc", ""), ("", "xy"),
                                      ("kitten", "sitting"), ("flaw", "lawn"),
                                      ("aaaa", "aaaa")])
    def test_known_pairs_both_paths(self, pair):
        a = np.frombuffer(pair[0].encode("utf-32-le"), dtype=np.int32).copy()
        b = np.frombuffer(pair[1].encode("utf-32-le"), dtype=np.int32).copy()
        expect = self.brute(pair[0], pair[1])
        assert K._levenshtein_numpy(a, b) == expect
        if K.NUMBA_ENABLED:
            assert K._levenshtein_numba(a, b) == expect

    def test_random_agreement(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = rng.integers(0, 5, rng.integers(0, 15)).astype(np.int32)
            b = rng.integers(0, 5, rng.integers(0, 15)).astype(np.int32)
            expect = self.brute(list(a), list(b))
            assert K._levenshtein_numpy(a, b) == expect
            if K.NUMBA_ENABLED:
                assert K._levenshtein_numba(a, b) == expect


class TestTedPaths:
    @needs_numba
    def test_numba_matches_python_dp(self):
        from oracles import random_tree
        from tablerec.evaluation import TedsCostModel, _annotate

        rng = np.random.default_rng(4)
        cost = TedsCostModel()
        for _ in range(100):
            a = _annotate(random_tree(rng, 8, ("table", "tr", "td")))
            b = _annotate(random_tree(rng, 8, ("table", "tr", "td")))
            n1, n2 = len(a.nodes), len(b.nodes)
            sub = np.empty((n1, n2))
            for i, na in enumerate(a.nodes):
                for j, nb in enumerate(b.nodes):
                    sub[i, j] = cost.substitute(na, nb)
            args = (a.lmds, a.keyroots, b.lmds, b.keyroots,
                    np.ones(n1), np.ones(n2), sub)
            assert K._ted_numba(*args) == K._ted_py(*args)


class TestEnvFlag:
    def test_disable_flag_selects_numpy(self):
        code = (
            "import tablerec.kernels as K; "
            "assert not K.NUMBA_ENABLED; "
            "assert K.levenshtein is K._levenshtein_numpy; "
            "assert K.ted_dp is K._ted_py; "
            "import numpy as np; "
            "a = np.array([1,2,3], dtype=np.int32); b = np.array([1,3], dtype=np.int32); "
            "assert K.levenshtein(a, b) == 1; "
            "print('ok')"
        )
        env = dict(os.environ, TABLEREC_DISABLE_NUMBA="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == "ok"

import os
import subprocess
import sys

import numpy as np
import pytest

from prusc import kernels
from prusc._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not available or disabled")


@needs_numba
def test_assign_parity(rng):
    X, C = rng.normal(size=(300, 7)), rng.normal(size=(9, 7))
    la, da = kernels._assign_np(X, C)
    lb, db = kernels._assign_nb(X, C)
    assert np.array_equal(la, lb)
    assert np.max(np.abs(da - db)) < 1e-12


@needs_numba
def test_centroid_sums_parity(rng):
    X = rng.normal(size=(200, 4))
    labels = rng.integers(0, 6, 200)
    sa, ca = kernels._centroid_sums_np(X, labels, 6)
    sb, cb = kernels._centroid_sums_nb(X, labels, 6)
    assert np.array_equal(ca, cb) and np.max(np.abs(sa - sb)) < 1e-12


@needs_numba
def test_distance_parity(rng):
    X, C = rng.normal(size=(100, 5)), rng.normal(size=(4, 5))
    labels = rng.integers(0, 4, 100)
    assert np.max(np.abs(kernels._sq_dist_to_np(X, C[0]) - kernels._sq_dist_to_nb(X, C[0]))) < 1e-12
    assert np.max(np.abs(kernels._sq_dist_rows_np(X, C, labels) - kernels._sq_dist_rows_nb(X, C, labels))) < 1e-12


@needs_numba
def test_group_count_parity(rng):
    y, a = rng.integers(0, 3, 500), rng.integers(0, 2, 500)
    ok = rng.random(500) < 0.7
    ca, ha = kernels._group_counts_np(y, a, ok, 3, 2)
    cb, hb = kernels._group_counts_nb(y, a, ok, 3, 2)
    assert np.array_equal(ca, cb) and np.array_equal(ha, hb)


@needs_numba
def test_optimizer_update_parity(rng):
    p0, v0, g = rng.normal(size=(30, 20)), rng.normal(size=(30, 20)), rng.normal(size=(30, 20))
    pa, va, pb, vb = p0.copy(), v0.copy(), p0.copy(), v0.copy()
    kernels._sgd_update_np(pa, va, g, 0.1, 0.9, 0.01)
    kernels._sgd_update_nb(pb, vb, g, 0.1, 0.9, 0.01)
    assert np.max(np.abs(pa - pb)) < 1e-15 and np.max(np.abs(va - vb)) < 1e-15
    m0, s0 = rng.normal(size=(30, 20)), rng.random((30, 20))
    args = (0.05, 0.9, 0.999, 1 - 0.9**3, 1 - 0.999**3, 1e-8)
    pa, ma, sa = p0.copy(), m0.copy(), s0.copy()
    pb, mb, sb = p0.copy(), m0.copy(), s0.copy()
    kernels._adam_update_np(pa, ma, sa, g, *args)
    kernels._adam_update_nb(pb, mb, sb, g, *args)
    assert np.max(np.abs(pa - pb)) < 1e-14 and np.max(np.abs(ma - mb)) < 1e-15


def test_fallback_flag_selects_numpy():
    code = "import prusc.kernels as k; print(k.BACKEND, k.assign is k._assign_np, k.sgd_update is k._sgd_update_np)"
    env = {**os.environ, "PRUSC_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True", "True"]


def test_public_kernels_follow_backend():
    if HAVE_NUMBA:
        assert kernels.BACKEND == "numba" and kernels.assign is kernels._assign_nb
    else:
        assert kernels.BACKEND == "numpy" and kernels.assign is kernels._assign_np
    assert kernels.gumbel_sigmoid is kernels._gumbel_sigmoid_np

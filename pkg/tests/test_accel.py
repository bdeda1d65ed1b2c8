import numpy as np
import pytest
import scipy.sparse as sp

from fairmig import _accel

pytestmark = pytest.mark.skipif(not hasattr(_accel, "spmm_numba"), reason="numba unavailable")


def test_spmm_backends_agree(rng):
    a = sp.random(50, 50, density=0.1, random_state=3, format="csr")
    d = rng.standard_normal((50, 7))
    np.testing.assert_allclose(_accel.spmm_numba(a, d), _accel.spmm_numpy(a, d), rtol=1e-12, atol=1e-12)


def test_row_cosine_backends_agree(rng):
    a = rng.standard_normal((40, 5))
    b = rng.standard_normal((40, 5))
    a[3] = 0.0
    for x, y in zip(_accel.row_cosine_numba(a, b, 1e-12), _accel.row_cosine_numpy(a, b, 1e-12)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-14)
    fwd = _accel.row_cosine_numpy(a, b, 1e-12)
    g = rng.standard_normal(40)
    for x, y in zip(_accel.row_cosine_backward_numba(a, b, *fwd, g),
                    _accel.row_cosine_backward_numpy(a, b, *fwd, g)):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-13)


def test_group_kernels_agree(rng):
    z = rng.standard_normal((60, 4))
    groups = rng.integers(0, 2, 60)
    np.testing.assert_allclose(_accel.group_sums_numba(z, groups, 2),
                               _accel.group_sums_numpy(z, groups, 2), rtol=1e-12)
    v = rng.random(60)
    for x, y in zip(_accel.group_mean_std_numba(v, groups, 2), _accel.group_mean_std_numpy(v, groups, 2)):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_zero_row_cosine_is_finite():
    a = np.zeros((2, 3))
    b = np.ones((2, 3))
    cos = _accel.row_cosine(a, b, 1e-12)[0]
    assert np.all(np.isfinite(cos)) and np.all(cos == 0)

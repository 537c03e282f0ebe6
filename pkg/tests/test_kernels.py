"""Compiled and numpy kernels must agree; the backend is chosen at import."""

import os
import subprocess
import sys

import numpy as np
import pytest

from shortcut_probe import _kernels_py as ref
from shortcut_probe import kernels

compiled = pytest.importorskip("shortcut_probe._kernels")


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 4, 6), (3, 8, 8, 8)])
def test_im2col_and_col2im_agree(shape):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape)
    cols = ref.im2col3x3(x)
    np.testing.assert_array_equal(compiled.im2col3x3(x), cols)
    g = rng.standard_normal(cols.shape)
    np.testing.assert_allclose(compiled.col2im3x3(g, *shape), ref.col2im3x3(g, *shape), atol=1e-13)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.standard_normal((2 * 16, 27))
    lhs = (kernels.im2col3x3(x) * g).sum()
    rhs = (x * kernels.col2im3x3(g, 2, 3, 4, 4)).sum()
    assert abs(lhs - rhs) < 1e-10


def test_avgpool_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 4))
    np.testing.assert_allclose(compiled.avgpool2x2(x), ref.avgpool2x2(x), atol=1e-15)
    g = rng.standard_normal((2, 3, 3, 2))
    np.testing.assert_array_equal(compiled.avgpool2x2_backward(g, 6, 4), ref.avgpool2x2_backward(g, 6, 4))


def test_pure_env_var_selects_numpy_backend():
    env = dict(os.environ, SHORTCUT_PROBE_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from shortcut_probe import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_backend_is_compiled():
    if os.environ.get("SHORTCUT_PROBE_PURE"):
        pytest.skip("pure backend forced")
    assert kernels.BACKEND == "cython"

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tmtstream import kernels

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernels not built")

finite = st.floats(-50, 50, allow_nan=False)
shapes = st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 9))


@compiled
@settings(max_examples=60, deadline=None)
@given(x=arrays(np.float64, shapes, elements=finite), seed=st.integers(0, 1000))
def test_compiled_matches_fallback(x, seed):
    p_c, p_py = kernels.softmax_forward_compiled(x), kernels.softmax_forward_py(x)
    np.testing.assert_allclose(p_c, p_py, rtol=1e-13, atol=1e-300)
    g = np.random.default_rng(seed).normal(size=x.shape)
    np.testing.assert_allclose(kernels.softmax_backward_compiled(p_py, g),
                               kernels.softmax_backward_py(p_py, g), rtol=1e-11, atol=1e-14)


@compiled
def test_compiled_handles_fill_value_and_views():
    x = np.random.default_rng(0).normal(size=(3, 6, 6))
    x[:, :, 4:] = -1e30
    view = x.transpose(0, 2, 1)  # non-contiguous input
    out = kernels.softmax_forward_compiled(view)
    np.testing.assert_allclose(out, kernels.softmax_forward_py(view), rtol=1e-13)
    assert np.all(kernels.softmax_forward_compiled(x)[:, :, 4:] == 0.0)


def test_fallback_rows_sum_to_one():
    x = np.random.default_rng(1).normal(size=(4, 7))
    np.testing.assert_allclose(kernels.softmax_forward_py(x).sum(axis=-1), 1.0, atol=1e-15)


def test_pure_python_switch():
    env = dict(os.environ, TMTSTREAM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from tmtstream import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"

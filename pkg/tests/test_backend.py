import os
import subprocess
import sys

import numpy as np
import pytest

from hsiconvlstm import _kernels_py, backend
from hsiconvlstm.tensor import ConvGeometry, conv_backward, conv_forward

needs_compiled = pytest.mark.skipif("cython" not in backend.available(), reason="extension not built")


def _case(seed):
    r = np.random.default_rng(seed)
    kernel = tuple(int(v) for v in r.integers(1, 4, size=3))
    stride = tuple(int(v) for v in r.integers(1, 3, size=3))
    out = tuple(int(v) for v in r.integers(1, 4, size=3))
    padded = tuple((o - 1) * s + k + int(r.integers(0, 2)) for o, s, k in zip(out, stride, kernel))
    xp = r.standard_normal((2,) + padded + (3,))
    return xp, kernel, stride, out


@needs_compiled
class TestBitIdentity:
    @pytest.mark.parametrize("seed", range(25))
    def test_im2col_col2im(self, seed):
        fast = backend.get("cython")
        xp, kernel, stride, out = _case(seed)
        a = fast.im2col(xp, kernel, stride, out)
        b = _kernels_py.im2col(xp, kernel, stride, out)
        assert a.shape == b.shape and np.array_equal(a, b)
        cols = np.random.default_rng(seed + 99).standard_normal(a.shape)
        assert np.array_equal(fast.col2im(cols, xp.shape, kernel, stride), _kernels_py.col2im(cols, xp.shape, kernel, stride))

    @pytest.mark.parametrize("seed", range(25))
    def test_maxpool(self, seed):
        fast = backend.get("cython")
        xp, kernel, stride, out = _case(seed)
        xp = np.round(xp, 1)  # force ties
        ya, aa = fast.maxpool_forward(xp, kernel, stride, out)
        yb, ab = _kernels_py.maxpool_forward(xp, kernel, stride, out)
        assert np.array_equal(ya, yb) and np.array_equal(aa, ab)
        g = np.random.default_rng(seed).standard_normal(ya.shape)
        assert np.array_equal(
            fast.maxpool_backward(g, aa, xp.shape, kernel, stride),
            _kernels_py.maxpool_backward(g, ab, xp.shape, kernel, stride),
        )

    def test_conv_pipeline(self, rng):
        x = rng.standard_normal((3, 4, 9, 9, 2))
        w = rng.standard_normal((3, 3, 3, 2, 5))
        geom = ConvGeometry((3, 3, 3))
        g = rng.standard_normal((3, 4, 9, 9, 5))
        results = {}
        for name in ("cython", "python"):
            backend.use(name)
            results[name] = (conv_forward(x, w, None, geom),) + conv_backward(x, w, g, geom)
        backend.use("cython")
        for a, b in zip(results["cython"], results["python"]):
            assert np.array_equal(a, b)


class TestSelection:
    def test_default_prefers_compiled(self):
        assert backend.NAME == backend.available()[0]

    def test_env_forces_fallback(self):
        env = dict(os.environ, HSICONVLSTM_BACKEND="python")
        out = subprocess.run(
            [sys.executable, "-c", "from hsiconvlstm import backend; print(backend.NAME)"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "python"

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            backend.get("fortran")

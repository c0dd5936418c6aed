"""Dense float64 tensor primitives: convolution, max pooling, element-wise ops.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with the channel
axis last. Spatial operations accept either an unbatched tensor
(``[H, W, C]`` / ``[D, H, W, C]``) or any number of leading batch axes.
"""

from dataclasses import dataclass

import numpy as np

from . import backend

SAME = "same_ceil"
VALID = "valid_floor"
PADDING_MODES = (SAME, VALID)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, axis=None):
        super().__init__(message if axis is None else f"{message} (axis {axis})")
        self.axis = axis


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _per_axis(value, nd, name):
    if isinstance(value, (int, np.integer, str)):
        return (value,) * nd
    value = tuple(value)
    if len(value) != nd:
        raise DimensionError(f"{name} needs {nd} entries, got {len(value)}")
    return value


def output_extent(n, k, s, mode):
    """Output length along one axis for input length ``n``."""
    if mode == SAME:
        return -(-n // s)
    if mode == VALID:
        if k > n:
            raise DimensionError(f"window {k} exceeds input extent {n}")
        return (n - k) // s + 1
    raise ValueError(f"unknown padding mode {mode!r}")


def pad_amounts(n, k, s, mode):
    """(before, after) padding; SAME splits floor before, ceil after."""
    if mode == VALID:
        return 0, 0
    out = output_extent(n, k, s, mode)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel extents, strides and per-axis padding of a convolution or pool."""

    kernel_extents: tuple
    stride: tuple = None
    padding: tuple = SAME
    out_channels: int = None

    def __post_init__(self):
        kernel = tuple(int(k) for k in self.kernel_extents)
        nd = len(kernel)
        if nd not in (1, 2, 3) or min(kernel) < 1:
            raise DimensionError(f"bad kernel extents {kernel}")
        stride = (1,) * nd if self.stride is None else tuple(int(s) for s in _per_axis(self.stride, nd, "stride"))
        if min(stride) < 1:
            raise DimensionError(f"strides must be positive, got {stride}")
        padding = _per_axis(self.padding, nd, "padding")
        for mode in padding:
            if mode not in PADDING_MODES:
                raise ValueError(f"unknown padding mode {mode!r}")
        object.__setattr__(self, "kernel_extents", kernel)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)

    @property
    def ndim(self):
        return len(self.kernel_extents)

    def output_spatial(self, spatial):
        spatial = tuple(spatial)
        if len(spatial) != self.ndim:
            raise DimensionError(f"expected {self.ndim} spatial axes, got {len(spatial)}")
        return tuple(
            output_extent(n, k, s, m) for n, k, s, m in zip(spatial, self.kernel_extents, self.stride, self.padding)
        )

    def pads(self, spatial):
        return tuple(pad_amounts(n, k, s, m) for n, k, s, m in zip(spatial, self.kernel_extents, self.stride, self.padding))


def _as5d(x, nd):
    """Fold leading axes into one batch axis and lift 2-D (or 1-D) to 3-D."""
    lead = x.shape[: x.ndim - nd - 1]
    spatial = x.shape[x.ndim - nd - 1 : -1]
    full = (1,) * (3 - nd) + spatial
    return x.reshape((int(np.prod(lead, dtype=np.int64)),) + full + (x.shape[-1],)), lead


def _lift(t, nd, fill):
    return (fill,) * (3 - nd) + tuple(t)


def _pad5d(x5, pads, nd, value):
    width = [(0, 0)] + [(0, 0)] * (3 - nd) + list(pads) + [(0, 0)]
    if not any(p for pair in pads for p in pair):
        return np.ascontiguousarray(x5)
    return np.pad(x5, width, mode="constant", constant_values=value)


def _check_conv_operands(x, w, b, geom):
    nd = w.ndim - 2
    if nd not in (1, 2, 3):
        raise DimensionError(f"kernel must have 3 to 5 axes, got {w.ndim}")
    if geom.ndim != nd:
        raise DimensionError(f"geometry is {geom.ndim}-D but kernel is {nd}-D")
    if tuple(w.shape[:nd]) != geom.kernel_extents:
        raise DimensionError(f"kernel extents {w.shape[:nd]} do not match geometry {geom.kernel_extents}")
    if x.ndim < nd + 1:
        raise DimensionError(f"input needs at least {nd + 1} axes, got {x.ndim}")
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {w.shape[-2]}", axis=x.ndim - 1)
    if b is not None and b.shape != (w.shape[-1],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[-1]} output channels")
    if geom.out_channels is not None and geom.out_channels != w.shape[-1]:
        raise DimensionError(f"geometry declares {geom.out_channels} output channels, kernel has {w.shape[-1]}")
    if VALID in geom.padding:
        spatial = x.shape[x.ndim - nd - 1 : -1]
        for axis, (n, k, m) in enumerate(zip(spatial, geom.kernel_extents, geom.padding)):
            if m == VALID and k > n:
                raise DimensionError(f"kernel extent {k} exceeds input extent {n}", axis=x.ndim - nd - 1 + axis)
    return nd


def conv_columns(x, geom):
    """Zero-pad ``x`` and gather its windows as a ``[rows, k*...*Cin]`` matrix.

    Returns the column matrix together with the output spatial extents.
    """
    nd = geom.ndim
    x5, lead = _as5d(np.asarray(x, dtype=np.float64), nd)
    spatial = x.shape[x.ndim - nd - 1 : -1]
    out_sp = geom.output_spatial(spatial)
    xp = _pad5d(x5, geom.pads(spatial), nd, 0.0)
    cols = backend.kernels.im2col(
        xp, _lift(geom.kernel_extents, nd, 1), _lift(geom.stride, nd, 1), _lift(out_sp, nd, 1)
    )
    return cols.reshape(-1, int(np.prod(geom.kernel_extents)) * x.shape[-1]), lead, out_sp


def conv_forward(x, w, b, geom, return_columns=False):
    """N-d cross-correlation (no kernel flip) plus per-channel bias.

    ``w`` has shape ``kernel_extents + (Cin, Cout)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_conv_operands(x, w, b, geom)
    cols, lead, out_sp = conv_columns(x, geom)
    y = cols @ w.reshape(-1, w.shape[-1])
    if b is not None:
        y += b
    y = y.reshape(lead + out_sp + (w.shape[-1],))
    if return_columns:
        return y, cols
    return y


def conv2d_forward(x, w, b, geom):
    """2-D convolution of ``[..., H, W, Cin]`` with a ``[k, k, Cin, Cout]`` kernel."""
    if w.ndim != 4:
        raise DimensionError(f"2-D kernel must have 4 axes, got {w.ndim}")
    return conv_forward(x, w, b, geom)


def conv3d_forward(x, w, b, geom):
    """3-D convolution of ``[..., D, H, W, Cin]`` with a ``[d, k, k, Cin, Cout]`` kernel."""
    if w.ndim != 5:
        raise DimensionError(f"3-D kernel must have 5 axes, got {w.ndim}")
    return conv_forward(x, w, b, geom)


def conv_input_grad(grad_out, w, input_shape, geom):
    """Gradient of a convolution with respect to its input only."""
    cout = w.shape[-1]
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, cout)
    dcols = g @ w.reshape(-1, cout).T
    return _cols_to_input(dcols, input_shape, geom)


def _cols_to_input(dcols, input_shape, geom):
    nd = geom.ndim
    lead = input_shape[: len(input_shape) - nd - 1]
    spatial = tuple(input_shape[len(input_shape) - nd - 1 : -1])
    cin = input_shape[-1]
    out_sp = geom.output_spatial(spatial)
    pads = geom.pads(spatial)
    n = int(np.prod(lead, dtype=np.int64))
    k5 = _lift(geom.kernel_extents, nd, 1)
    o5 = _lift(out_sp, nd, 1)
    padded = (n,) + _lift(tuple(s + a + b for s, (a, b) in zip(spatial, pads)), nd, 1) + (cin,)
    dcols = np.ascontiguousarray(dcols.reshape((n,) + o5 + k5 + (cin,)))
    dxp = backend.kernels.col2im(dcols, padded, k5, _lift(geom.stride, nd, 1))
    crop = tuple(slice(a, a + s) for s, (a, _) in zip(spatial, pads))
    dx = dxp[(slice(None),) + (slice(None),) * (3 - nd) + crop + (slice(None),)]
    return dx.reshape(tuple(input_shape))


def conv_backward(x, w, grad_out, geom, columns=None):
    """Analytic gradients of :func:`conv_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``. ``columns`` may carry the
    gathered windows saved by the forward pass to skip recomputing them.
    """
    x = np.asarray(x, dtype=np.float64)
    nd = _check_conv_operands(x, w, None, geom)
    spatial = x.shape[x.ndim - nd - 1 : -1]
    expected = x.shape[: x.ndim - nd - 1] + geom.output_spatial(spatial) + (w.shape[-1],)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    if columns is None:
        columns, _, _ = conv_columns(x, geom)
    return conv_backward_columns(columns, x.shape, w, grad_out, geom)


def conv_backward_columns(columns, input_shape, w, grad_out, geom):
    """:func:`conv_backward` driven by saved columns instead of the raw input."""
    cout = w.shape[-1]
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, cout)
    grad_w = (columns.T @ g).reshape(w.shape)
    grad_b = g.sum(axis=0)
    grad_x = _cols_to_input(g @ w.reshape(-1, cout).T, tuple(input_shape), geom)
    return grad_x, grad_w, grad_b


def maxpool_forward(x, window, stride=None, mode=SAME):
    """Max pooling over the trailing spatial axes of ``[..., *spatial, C]``.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output value, the
    row-major index inside its window of the first maximal element.
    """
    geom = ConvGeometry(tuple(window), stride if stride is not None else tuple(window), mode)
    x = np.asarray(x, dtype=np.float64)
    nd = geom.ndim
    if x.ndim < nd + 1:
        raise DimensionError(f"input needs at least {nd + 1} axes, got {x.ndim}")
    spatial = x.shape[x.ndim - nd - 1 : -1]
    out_sp = geom.output_spatial(spatial)
    x5, lead = _as5d(x, nd)
    xp = _pad5d(x5, geom.pads(spatial), nd, -np.inf)
    out, arg = backend.kernels.maxpool_forward(
        xp, _lift(geom.kernel_extents, nd, 1), _lift(geom.stride, nd, 1), _lift(out_sp, nd, 1)
    )
    shape = lead + out_sp + (x.shape[-1],)
    return out.reshape(shape), arg.reshape(shape)


def maxpool_backward(grad_out, argmax, input_shape, window, stride=None, mode=SAME):
    """Scatter each output gradient to the input position that won its window."""
    geom = ConvGeometry(tuple(window), stride if stride is not None else tuple(window), mode)
    nd = geom.ndim
    input_shape = tuple(input_shape)
    spatial = input_shape[len(input_shape) - nd - 1 : -1]
    out_sp = geom.output_spatial(spatial)
    lead = input_shape[: len(input_shape) - nd - 1]
    if grad_out.shape != lead + out_sp + (input_shape[-1],):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match pooled shape")
    pads = geom.pads(spatial)
    n = int(np.prod(lead, dtype=np.int64))
    o5 = (n,) + _lift(out_sp, nd, 1) + (input_shape[-1],)
    padded = (n,) + _lift(tuple(s + a + b for s, (a, b) in zip(spatial, pads)), nd, 1) + (input_shape[-1],)
    dxp = backend.kernels.maxpool_backward(
        np.ascontiguousarray(grad_out, dtype=np.float64).reshape(o5),
        np.ascontiguousarray(argmax, dtype=np.int64).reshape(o5),
        padded,
        _lift(geom.kernel_extents, nd, 1),
        _lift(geom.stride, nd, 1),
    )
    crop = tuple(slice(a, a + s) for s, (a, _) in zip(spatial, pads))
    return dxp[(slice(None),) + (slice(None),) * (3 - nd) + crop + (slice(None),)].reshape(input_shape)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return a + b


def hadamard(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return a * b


def scale(a, factor):
    return np.asarray(a, dtype=np.float64) * float(factor)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


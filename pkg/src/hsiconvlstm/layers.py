"""Dense, dropout, flatten and softmax classifier layers, plus layer objects.

The functional operations at the top are stateless. The ``*Layer`` classes
below wrap them (and the convolution, pooling and ConvLSTM primitives) into
objects with ``forward``/``backward`` methods that a model stacks in order.
"""

import numpy as np

from . import cells
from .tensor import (
    ConvGeometry,
    DimensionError,
    conv_backward_columns,
    conv_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
)

PROB_FLOOR = 1e-12


def dense_forward(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match dense input {w.shape[0]}", axis=x.ndim - 1)
    return x @ w + b


def dense_backward(x, w, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)`` for ``y = x @ w + b``."""
    x2 = x.reshape(-1, w.shape[0])
    g2 = grad_out.reshape(-1, w.shape[1])
    return (g2 @ w.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


def softmax(z):
    """Row-wise softmax with the row maximum subtracted first."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DimensionError("softmax needs at least two classes", axis=z.ndim - 1)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    """One-hot rows for integer class ids ``1..num_classes``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValueError(f"class ids must lie in 1..{num_classes}")
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, (labels - 1)[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def _targets(target, num_classes):
    target = np.asarray(target)
    if target.ndim == 2 and target.shape[1] == num_classes and np.issubdtype(target.dtype, np.floating):
        return target
    return one_hot(target, num_classes)


def cross_entropy(pred, target):
    """Batch mean of ``-sum(Y * log(P))``; ``target`` is one-hot or ids ``1..N``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = _targets(target, pred.shape[-1]).reshape(pred.shape)
    return float(-(y * np.log(np.maximum(pred, PROB_FLOOR))).sum() / pred.shape[0])


def softmax_xent_backward(pred, target):
    """Gradient of the batch-mean loss with respect to the logits: ``(P - Y) / batch``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = _targets(target, pred.shape[-1]).reshape(pred.shape)
    return (pred - y) / pred.shape[0]


def dropout_forward(x, rate, training, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is ``None`` when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def flatten(x):
    """Collapse every axis after the batch axis."""
    return x.reshape(x.shape[0], -1)


class Layer:
    """Base class: named parameters, their gradients, and a cached forward."""

    has_params = False

    def __init__(self, name):
        self.name = name
        self.grads = {}

    def params(self):
        return {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        """Per-sample output shape for a per-sample input shape."""
        raise NotImplementedError


class ConvLayer(Layer):
    has_params = True

    def __init__(self, name, geom, in_channels, out_channels, rng, activation="relu"):
        super().__init__(name)
        self.geom = ConvGeometry(geom.kernel_extents, geom.stride, geom.padding, out_channels)
        area = int(np.prod(self.geom.kernel_extents))
        limit = np.sqrt(6.0 / (area * (in_channels + out_channels)))
        self.w = rng.uniform(-limit, limit, size=self.geom.kernel_extents + (in_channels, out_channels))
        self.b = np.zeros(out_channels)
        self.activation = activation

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, training=False, rng=None):
        y, cols = conv_forward(x, self.w, self.b, self.geom, return_columns=True)
        if self.activation == "relu":
            y = relu(y)
        self._cache = (cols, x.shape, y)
        return y

    def backward(self, grad):
        cols, shape, y = self._cache
        if self.activation == "relu":
            grad = grad * (y > 0)
        dx, dw, db = conv_backward_columns(cols, shape, self.w, grad, self.geom)
        self.grads = {"w": dw, "b": db}
        return dx

    def output_shape(self, shape):
        nd = self.geom.ndim
        return tuple(shape[:-nd - 1]) + self.geom.output_spatial(shape[-nd - 1 : -1]) + (self.w.shape[-1],)


class MaxPoolLayer(Layer):
    def __init__(self, name, window, stride=None, padding="same_ceil"):
        super().__init__(name)
        self.geom = ConvGeometry(tuple(window), stride if stride is not None else tuple(window), padding)

    def forward(self, x, training=False, rng=None):
        out, arg = maxpool_forward(x, self.geom.kernel_extents, self.geom.stride, self.geom.padding)
        self._cache = (arg, x.shape)
        return out

    def backward(self, grad):
        arg, shape = self._cache
        return maxpool_backward(grad, arg, shape, self.geom.kernel_extents, self.geom.stride, self.geom.padding)

    def output_shape(self, shape):
        nd = self.geom.ndim
        return tuple(shape[:-nd - 1]) + self.geom.output_spatial(shape[-nd - 1 : -1]) + (shape[-1],)


class ConvLstmLayer(Layer):
    """ConvLSTM over a time axis (``sequence=True``) or a single step without one."""

    has_params = True

    def __init__(self, name, kernel, in_channels, hidden, rng, sequence=True, return_mode="all_steps", peephole=True):
        super().__init__(name)
        self.cell = cells.ConvLstmParams.init(kernel, in_channels, hidden, rng, peephole=peephole)
        self.sequence = sequence
        self.return_mode = return_mode if sequence else "last_step"

    def params(self):
        return self.cell.arrays()

    def forward(self, x, training=False, rng=None):
        seq = x if self.sequence else x[:, None]
        h, _, cache = cells.unroll(seq, self.cell, None, self.return_mode, keep_cache=training)
        self._cache = cache
        return h if self.sequence else h[:, 0]

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward needs a forward pass with training=True")
        g = grad if self.sequence else grad[:, None]
        grads, dx, _ = cells.cell_backward(self._cache, g)
        self.grads = grads
        return dx if self.sequence else dx[:, 0]

    def output_shape(self, shape):
        nd = self.cell.ndim
        spatial = tuple(shape[-nd - 1 : -1])
        if not self.sequence:
            return spatial + (self.cell.hidden_units,)
        steps = shape[0] if self.return_mode == "all_steps" else 1
        return (steps,) + spatial + (self.cell.hidden_units,)


class DropoutLayer(Layer):
    def __init__(self, name, rate):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        y, self._mask = dropout_forward(x, self.rate, training, rng)
        return y

    def backward(self, grad):
        return dropout_backward(grad, self._mask)

    def output_shape(self, shape):
        return tuple(shape)


class FlattenLayer(Layer):
    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return flatten(x)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class DenseLayer(Layer):
    has_params = True

    def __init__(self, name, in_features, out_features, rng, activation=None):
        super().__init__(name)
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.w = rng.uniform(-limit, limit, size=(in_features, out_features))
        self.b = np.zeros(out_features)
        self.activation = activation

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, training=False, rng=None):
        y = dense_forward(x, self.w, self.b)
        if self.activation == "relu":
            y = relu(y)
        self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cache
        if self.activation == "relu":
            grad = grad * (y > 0)
        dx, dw, db = dense_backward(x, self.w, grad)
        self.grads = {"w": dw, "b": db}
        return dx

    def output_shape(self, shape):
        if tuple(shape) != (self.w.shape[0],):
            raise DimensionError(f"{self.name}: expects input ({self.w.shape[0]},), got {tuple(shape)}")
        return (self.w.shape[1],)

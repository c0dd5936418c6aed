"""LSTM and convolutional LSTM cells with backpropagation through time.

Gate equations (``*`` is a matrix product for the LSTM and a SAME, stride-1
convolution for ConvLSTM; ``o`` is the element-wise product)::

    i_t = sigmoid(W_xi * x_t + W_hi * h_{t-1} + w_ci o c_{t-1} + b_i)
    f_t = sigmoid(W_xf * x_t + W_hf * h_{t-1} + w_cf o c_{t-1} + b_f)
    g_t = tanh(W_xc * x_t + W_hc * h_{t-1} + b_c)
    c_t = f_t o c_{t-1} + i_t o g_t
    o_t = sigmoid(W_xo * x_t + W_ho * h_{t-1} + w_co o c_t + b_o)
    h_t = o_t o tanh(c_t)

Peephole weights ``w_c*`` are one value per hidden unit (per channel for
ConvLSTM), broadcast over space.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    SAME,
    ConvGeometry,
    DimensionError,
    conv_backward_columns,
    conv_forward,
    sigmoid,
)

GATES = ("i", "f", "c", "o")
INPUT_WEIGHTS = tuple(f"w_x{g}" for g in GATES)
STATE_WEIGHTS = tuple(f"w_h{g}" for g in GATES)
PEEPHOLES = ("w_ci", "w_cf", "w_co")
BIASES = tuple(f"b_{g}" for g in GATES)
PARAM_NAMES = INPUT_WEIGHTS + STATE_WEIGHTS + PEEPHOLES + BIASES

RETURN_MODES = ("all_steps", "last_step")


@dataclass(frozen=True)
class CellState:
    """Hidden output ``h`` and cell state ``c`` of one step."""

    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if np.shape(self.h) != np.shape(self.c):
            raise DimensionError(f"h {np.shape(self.h)} and c {np.shape(self.c)} differ in shape")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


class _GateParams:
    def arrays(self):
        """Parameter arrays keyed by name (views, not copies)."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **arrays):
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs.update(arrays)
        return type(self)(**kwargs)

    @property
    def hidden_units(self):
        return self.b_i.shape[0]

    def _fused(self):
        wx = np.concatenate([getattr(self, n) for n in INPUT_WEIGHTS], axis=-1)
        wh = np.concatenate([getattr(self, n) for n in STATE_WEIGHTS], axis=-1)
        b = np.concatenate([getattr(self, n) for n in BIASES])
        return wx, wh, b


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LstmParams(_GateParams):
    """Fully connected LSTM weights; ``w_x*`` is ``[in, hidden]``, ``w_h*`` is ``[hidden, hidden]``."""

    w_xi: np.ndarray
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hi: np.ndarray
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    peephole: bool = True

    def __post_init__(self):
        n_in, hidden = self.w_xi.shape
        for name in INPUT_WEIGHTS:
            _expect(self, name, (n_in, hidden))
        for name in STATE_WEIGHTS:
            _expect(self, name, (hidden, hidden))
        for name in PEEPHOLES + BIASES:
            _expect(self, name, (hidden,))

    @property
    def input_size(self):
        return self.w_xi.shape[0]

    @classmethod
    def init(cls, input_size, hidden_units, rng, forget_bias=1.0, peephole=True):
        arrays = {}
        for name in INPUT_WEIGHTS:
            arrays[name] = _glorot(rng, (input_size, hidden_units), input_size, hidden_units)
        for name in STATE_WEIGHTS:
            arrays[name] = _glorot(rng, (hidden_units, hidden_units), hidden_units, hidden_units)
        for name in PEEPHOLES + BIASES:
            arrays[name] = np.zeros(hidden_units)
        arrays["b_f"] += forget_bias
        return cls(**arrays, peephole=peephole)


@dataclass
class ConvLstmParams(_GateParams):
    """ConvLSTM weights; kernels are ``kernel_extents + (Cin | hidden, hidden)``."""

    w_xi: np.ndarray
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hi: np.ndarray
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    peephole: bool = True
    geom: ConvGeometry = field(default=None)

    def __post_init__(self):
        kernel = self.w_xi.shape[:-2]
        if self.geom is None:
            self.geom = ConvGeometry(kernel, 1, SAME, self.w_xi.shape[-1])
        if self.geom.stride != (1,) * self.geom.ndim or set(self.geom.padding) != {SAME}:
            raise DimensionError("ConvLSTM convolutions must be stride 1 with same_ceil padding")
        if tuple(kernel) != self.geom.kernel_extents:
            raise DimensionError(f"kernel extents {kernel} do not match geometry {self.geom.kernel_extents}")
        cin, hidden = self.w_xi.shape[-2:]
        for name in INPUT_WEIGHTS:
            _expect(self, name, kernel + (cin, hidden))
        for name in STATE_WEIGHTS:
            _expect(self, name, kernel + (hidden, hidden))
        for name in PEEPHOLES + BIASES:
            _expect(self, name, (hidden,))

    @property
    def ndim(self):
        return self.geom.ndim

    @property
    def in_channels(self):
        return self.w_xi.shape[-2]

    @classmethod
    def init(cls, kernel_extents, in_channels, hidden_channels, rng, forget_bias=1.0, peephole=True):
        kernel = tuple(kernel_extents)
        area = int(np.prod(kernel))
        arrays = {}
        for name in INPUT_WEIGHTS:
            arrays[name] = _glorot(rng, kernel + (in_channels, hidden_channels), area * in_channels, area * hidden_channels)
        for name in STATE_WEIGHTS:
            arrays[name] = _glorot(
                rng, kernel + (hidden_channels, hidden_channels), area * hidden_channels, area * hidden_channels
            )
        for name in PEEPHOLES + BIASES:
            arrays[name] = np.zeros(hidden_channels)
        arrays["b_f"] += forget_bias
        return cls(**arrays, peephole=peephole)


def _expect(params, name, shape):
    got = getattr(params, name).shape
    if tuple(got) != tuple(shape):
        raise DimensionError(f"{name} has shape {got}, expected {tuple(shape)}")


def lstm_step(x, prev, p):
    """One LSTM step, written gate by gate.

    ``x`` is ``[in]`` or ``[batch, in]``; ``prev`` may be ``None`` for a zero state.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.input_size:
        raise DimensionError(f"input width {x.shape[-1]} does not match {p.input_size}", axis=x.ndim - 1)
    shape = x.shape[:-1] + (p.hidden_units,)
    if prev is None:
        prev = CellState.zeros(shape)
    if prev.h.shape != shape:
        raise DimensionError(f"state shape {prev.h.shape} does not match {shape}")
    h, c = prev.h, prev.c
    k = 1.0 if p.peephole else 0.0
    i = sigmoid(x @ p.w_xi + h @ p.w_hi + k * p.w_ci * c + p.b_i)
    f = sigmoid(x @ p.w_xf + h @ p.w_hf + k * p.w_cf * c + p.b_f)
    g = np.tanh(x @ p.w_xc + h @ p.w_hc + p.b_c)
    c_new = f * c + i * g
    o = sigmoid(x @ p.w_xo + h @ p.w_ho + k * p.w_co * c_new + p.b_o)
    return CellState(o * np.tanh(c_new), c_new)


class _Dense:
    def __init__(self, spatial_ndim=0):
        self.ndim = spatial_ndim

    def forward(self, x, w):
        return x @ w, x

    def backward(self, g, w, x):
        n_in, n_out = w.shape
        return g @ w.T, x.reshape(-1, n_in).T @ g.reshape(-1, n_out)


class _Conv:
    def __init__(self, geom):
        # fused gate kernels carry 4x the declared hidden channels
        self.geom = ConvGeometry(geom.kernel_extents, geom.stride, geom.padding)
        self.ndim = geom.ndim

    def forward(self, x, w):
        y, cols = conv_forward(x, w, None, self.geom, return_columns=True)
        return y, (cols, x.shape)

    def backward(self, g, w, ctx):
        cols, shape = ctx
        dx, dw, _ = conv_backward_columns(cols, shape, w, g, self.geom)
        return dx, dw


def _transform(p):
    return _Conv(p.geom) if isinstance(p, ConvLstmParams) else _Dense()


@dataclass
class UnrollCache:
    """Activations saved by :func:`unroll` for :func:`cell_backward`."""

    params: object
    input_shape: tuple
    return_mode: str
    has_init: bool
    x_ctx: object = None
    steps: list = field(default_factory=list)


def unroll(x_seq, p, init=None, return_mode="all_steps", keep_cache=True):
    """Run the cell over a batched sequence.

    ``x_seq`` is ``[batch, time, *spatial, Cin]`` (no spatial axes for the
    LSTM). Returns ``(hidden, final_state, cache)``; ``hidden`` keeps the time
    axis, of length 1 for ``last_step``.
    """
    if return_mode not in RETURN_MODES:
        raise ValueError(f"unknown return mode {return_mode!r}")
    x_seq = np.asarray(x_seq, dtype=np.float64)
    xf = _transform(p)
    nd = xf.ndim
    if x_seq.ndim != nd + 3:
        raise DimensionError(f"sequence must have {nd + 3} axes [batch, time, ..., C], got {x_seq.ndim}")
    batch, steps = x_seq.shape[:2]
    if steps == 0:
        raise DimensionError("empty sequence", axis=1)
    cin = p.in_channels if nd else p.input_size
    if x_seq.shape[-1] != cin:
        raise DimensionError(f"input has {x_seq.shape[-1]} channels, cell expects {cin}", axis=x_seq.ndim - 1)
    hidden = p.hidden_units
    state_shape = (batch,) + x_seq.shape[2:-1] + (hidden,)
    if init is not None and init.h.shape != state_shape:
        raise DimensionError(f"initial state shape {init.h.shape} does not match {state_shape}")

    wx, wh, bias = p._fused()
    flat = x_seq.reshape((batch * steps,) + x_seq.shape[2:])
    ax, x_ctx = xf.forward(flat, wx)
    ax = ax.reshape((batch, steps) + ax.shape[1:]) + bias
    if ax.shape[2:-1] != x_seq.shape[2:-1]:
        raise DimensionError("input-to-state transform must preserve spatial extents")

    peep = p.peephole
    cache = UnrollCache(p, x_seq.shape, return_mode, init is not None, x_ctx if keep_cache else None)
    h = init.h if init is not None else np.zeros(state_shape)
    c = init.c if init is not None else np.zeros(state_shape)
    outputs = []
    for t in range(steps):
        a = ax[:, t].copy()
        h_ctx = None
        if t > 0 or init is not None:
            ah, h_ctx = xf.forward(h, wh)
            a += ah
        a_i, a_f, a_c, a_o = np.split(a, 4, axis=-1)
        if peep:
            a_i = a_i + p.w_ci * c
            a_f = a_f + p.w_cf * c
        i, f, g = sigmoid(a_i), sigmoid(a_f), np.tanh(a_c)
        c_prev = c
        c = f * c_prev + i * g
        if peep:
            a_o = a_o + p.w_co * c
        o = sigmoid(a_o)
        tc = np.tanh(c)
        h = o * tc
        if keep_cache:
            cache.steps.append((h_ctx, c_prev, i, f, g, o, c, tc))
        if return_mode == "all_steps":
            outputs.append(h)
    if return_mode == "last_step":
        outputs.append(h)
    return np.stack(outputs, axis=1), CellState(h, c), (cache if keep_cache else None)


def cell_backward(cache, grad_h, per_step=False):
    """Backpropagation through time for :func:`unroll`.

    ``grad_h`` matches the ``hidden`` output of the forward unroll. Returns
    ``(param_grads, grad_x_seq, grad_init)``; ``grad_init`` is ``None`` when
    the forward pass started from the implicit zero state. With
    ``per_step=True`` a fourth item lists each step's parameter contribution.
    """
    if not cache.steps:
        raise ValueError("cache holds no saved activations; run unroll with keep_cache=True")
    p = cache.params
    xf = _transform(p)
    batch, steps = cache.input_shape[:2]
    expected_t = steps if cache.return_mode == "all_steps" else 1
    state_shape = (batch,) + tuple(cache.input_shape[2:-1]) + (p.hidden_units,)
    if grad_h.shape != (batch, expected_t) + state_shape[1:]:
        raise DimensionError(f"grad_h shape {grad_h.shape} does not match forward output")
    wx, wh, _ = p._fused()
    hidden = p.hidden_units
    peep = p.peephole
    red = tuple(range(len(state_shape) - 1))

    d_a = np.zeros((batch, steps) + state_shape[1:-1] + (4 * hidden,))
    d_wh = np.zeros(wh.shape)
    d_peep = {name: np.zeros(hidden) for name in PEEPHOLES}
    contributions = []
    dh_next = np.zeros(state_shape)
    dc_next = np.zeros(state_shape)
    for t in reversed(range(steps)):
        h_ctx, c_prev, i, f, g, o, c, tc = cache.steps[t]
        if cache.return_mode == "all_steps":
            dh = grad_h[:, t] + dh_next
        else:
            dh = dh_next + (grad_h[:, 0] if t == steps - 1 else 0.0)
        da_o = dh * tc * o * (1.0 - o)
        dc = dc_next + dh * o * (1.0 - tc * tc)
        if peep:
            dc = dc + da_o * p.w_co
        da_f = dc * c_prev * f * (1.0 - f)
        da_i = dc * g * i * (1.0 - i)
        da_c = dc * i * (1.0 - g * g)
        dc_next = dc * f
        step_peep = {}
        if peep:
            dc_next = dc_next + da_i * p.w_ci + da_f * p.w_cf
            step_peep = {
                "w_ci": (da_i * c_prev).sum(axis=red),
                "w_cf": (da_f * c_prev).sum(axis=red),
                "w_co": (da_o * c).sum(axis=red),
            }
            for name, value in step_peep.items():
                d_peep[name] += value
        da = np.concatenate([da_i, da_f, da_c, da_o], axis=-1)
        d_a[:, t] = da
        step_wh = None
        if h_ctx is not None:
            dh_next, step_wh = xf.backward(da, wh, h_ctx)
            d_wh += step_wh
        else:
            dh_next = np.zeros(state_shape)
        if per_step:
            contributions.append((t, da, step_wh, step_peep))

    flat_da = d_a.reshape((batch * steps,) + d_a.shape[2:])
    dx, d_wx = xf.backward(flat_da, wx, cache.x_ctx)
    grads = {}
    _split_into(grads, INPUT_WEIGHTS, d_wx)
    _split_into(grads, STATE_WEIGHTS, d_wh)
    _split_into(grads, BIASES, d_a.reshape(-1, 4 * hidden).sum(axis=0))
    for name in PEEPHOLES:
        grads[name] = d_peep[name] if peep else np.zeros(hidden)
    grad_init = CellState(dh_next, dc_next) if cache.has_init else None
    grad_x = dx.reshape(cache.input_shape)
    if not per_step:
        return grads, grad_x, grad_init
    return grads, grad_x, grad_init, _per_step_grads(cache, contributions, xf, wx)


def _per_step_grads(cache, contributions, xf, wx):
    p = cache.params
    hidden = p.hidden_units
    batch, steps = cache.input_shape[:2]
    x_all = None
    if isinstance(xf, _Dense):
        x_all = cache.x_ctx.reshape(batch, steps, -1)
    out = [None] * steps
    for t, da, step_wh, step_peep in contributions:
        if x_all is not None:
            _, d_wx = xf.backward(da, wx, x_all[:, t])
        else:
            cols, shape = cache.x_ctx
            rows = cols.reshape(batch, steps, -1, cols.shape[-1])[:, t].reshape(-1, cols.shape[-1])
            d_wx = (rows.T @ da.reshape(-1, 4 * hidden)).reshape(wx.shape)
        g = {}
        _split_into(g, INPUT_WEIGHTS, d_wx)
        _split_into(g, STATE_WEIGHTS, step_wh if step_wh is not None else np.zeros(p._fused()[1].shape))
        _split_into(g, BIASES, da.reshape(-1, 4 * hidden).sum(axis=0))
        for name in PEEPHOLES:
            g[name] = step_peep.get(name, np.zeros(hidden))
        out[t] = g
    return out


def _split_into(target, names, fused):
    for name, part in zip(names, np.split(fused, 4, axis=-1)):
        target[name] = part


def _step(x, prev, p, nd):
    if not isinstance(p, ConvLstmParams) or p.ndim != nd:
        raise DimensionError(f"expected {nd}-D ConvLSTM parameters")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == nd + 1
    if single:
        x = x[None]
        if prev is not None:
            prev = CellState(prev.h[None], prev.c[None])
    if x.ndim != nd + 2:
        raise DimensionError(f"input must be [*spatial, C] or [batch, *spatial, C] with {nd} spatial axes")
    _, state, _ = unroll(x[:, None], p, prev, "last_step", keep_cache=False)
    if single:
        return CellState(state.h[0], state.c[0])
    return state


def convlstm2d_step(x, prev, p):
    """One ConvLSTM step on ``[H, W, Cin]`` (or batched) input."""
    return _step(x, prev, p, 2)


def convlstm3d_step(x, prev, p):
    """One ConvLSTM step on ``[D, H, W, Cin]`` (or batched) input."""
    return _step(x, prev, p, 3)


def unroll_sequence(inputs, init, p, return_mode="all_steps"):
    """Feed a list of equally shaped, unbatched tensors through the cell.

    Returns ``(hidden, final_state)`` where ``hidden`` stacks every step's
    output along a new leading axis (length 1 for ``last_step``).
    """
    if len(inputs) == 0:
        raise DimensionError("empty sequence")
    shapes = {np.shape(x) for x in inputs}
    if len(shapes) != 1:
        raise DimensionError(f"sequence elements differ in shape: {sorted(shapes)}")
    x_seq = np.stack([np.asarray(x, dtype=np.float64) for x in inputs])[None]
    if init is not None:
        init = CellState(init.h[None], init.c[None])
    hidden, state, _ = unroll(x_seq, p, init, return_mode, keep_cache=False)
    return hidden[0], CellState(state.h[0], state.c[0])

"""The five network stacks, their composition, and checkpoint files.

``build`` returns a declarative :class:`ModelSpec`; :class:`Model` turns a
spec plus a seed into initialised layers that run forward and backward.
Patch batches arrive as ``[batch, s, s, K]`` and each model reshapes them to
its own input layout:

* ``cnn2d``, ``sacl2dnn``: ``[batch, s, s, 1]`` (single principal component)
* ``sscl2dnn``: ``[batch, K, s, s, 1]`` read as a K-step sequence of 2-D maps
* ``cnn3d``, ``sscl3dnn``: ``[batch, K, s, s, 1]`` read as one 3-D volume
"""

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .errors import ChecksumError, FormatError, SpecMismatchError, VersionError
from .layers import cross_entropy, softmax, softmax_xent_backward
from .optim import DEFAULT_LEARNING_RATES, AdamState
from .tensor import SAME, VALID, ConvGeometry, DimensionError

MODEL_NAMES = ("cnn2d", "cnn3d", "sacl2dnn", "sscl2dnn", "sscl3dnn")
ACTIVATIONS = ("relu", None)
CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str
    name: str
    kernel: tuple = None
    channels: int = None
    stride: tuple = None
    padding: object = SAME
    rate: float = None
    return_mode: str = None
    sequence: bool = None
    activation: str = None

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("kernel", "stride"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if isinstance(d.get("padding"), list):
            d["padding"] = tuple(d["padding"])
        return cls(**d)


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    num_classes: int
    layers: list = field(default_factory=list)
    learning_rate: float = 1e-3
    peephole: bool = True

    @property
    def components(self):
        return self.input_shape[0] if len(self.input_shape) == 3 else 1

    @property
    def window(self):
        return self.input_shape[-1]

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "learning_rate": self.learning_rate,
            "peephole": self.peephole,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            layers=[LayerSpec.from_dict(x) for x in d["layers"]],
            learning_rate=float(d.get("learning_rate", 1e-3)),
            peephole=bool(d.get("peephole", True)),
        )


def _conv(name, kernel, channels, activation, padding=SAME):
    return LayerSpec("conv", name, kernel=kernel, channels=channels, padding=padding, activation=activation)


def _pool(name, window, padding):
    return LayerSpec("maxpool", name, kernel=window, stride=window, padding=padding)


def _convlstm(name, kernel, channels, sequence, return_mode="all_steps"):
    return LayerSpec("convlstm", name, kernel=kernel, channels=channels, sequence=sequence, return_mode=return_mode)


def _head(num_classes, activation, dropout_after_dense=None):
    tail = [LayerSpec("flatten", "flatten"), LayerSpec("dense", "dense", channels=128, activation=activation)]
    if dropout_after_dense is not None:
        tail.append(LayerSpec("dropout", "dropout_dense", rate=dropout_after_dense))
    tail.append(LayerSpec("dense", "output", channels=num_classes))
    return tail


def build(name, K=10, s=27, N=16, peephole=True, dense_activation="relu", conv_activation="relu"):
    """Layer stack of the named network for ``K`` components, ``s``-pixel windows and ``N`` classes.

    ``dense_activation`` applies to the hidden dense layer and
    ``conv_activation`` to the convolutions of the CNN baselines; ``None``
    leaves them linear. ``peephole=False`` drops the cells' peephole terms.
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    for act in (dense_activation, conv_activation):
        if act not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {act!r}")
    if s < 1 or K < 1 or N < 2:
        raise ValueError(f"need s >= 1, K >= 1, N >= 2 (got s={s}, K={K}, N={N})")
    if name in ("cnn2d", "sacl2dnn") and K != 1:
        raise ValueError(f"{name} works on the first principal component only; K must be 1, got {K}")
    lr = DEFAULT_LEARNING_RATES.get(name, 1e-3)
    if name == "cnn2d":
        stack = [
            _conv("conv1", (4, 4), 32, conv_activation),
            _pool("pool1", (2, 2), VALID),
            _conv("conv2", (5, 5), 64, conv_activation),
            _pool("pool2", (2, 2), VALID),
            LayerSpec("dropout", "dropout1", rate=0.5),
            _conv("conv3", (4, 4), 128, conv_activation),
            LayerSpec("dropout", "dropout2", rate=0.5),
        ] + _head(N, dense_activation)
        shape = (s, s)
    elif name == "cnn3d":
        stack = [
            _conv("conv1", (4, 4, 4), 32, conv_activation),
            _pool("pool1", (2, 2, 2), VALID),
            _conv("conv2", (5, 5, 5), 64, conv_activation),
            # printed shapes round the band axis up (5 -> 3) and space down (13 -> 6)
            _pool("pool2", (2, 2, 2), (SAME, VALID, VALID)),
            LayerSpec("dropout", "dropout1", rate=0.5),
            _conv("conv3", (4, 4, 4), 128, conv_activation),
            LayerSpec("dropout", "dropout2", rate=0.5),
        ] + _head(N, dense_activation)
        shape = (K, s, s)
    elif name == "sacl2dnn":
        stack = [
            _convlstm("convlstm1", (3, 3), 32, sequence=False),
            _pool("pool1", (2, 2), SAME),
            _convlstm("convlstm2", (5, 5), 64, sequence=False),
            _pool("pool2", (2, 2), SAME),
            LayerSpec("dropout", "dropout1", rate=0.25),
        ] + _head(N, dense_activation)
        shape = (s, s)
    elif name == "sscl2dnn":
        stack = [
            _convlstm("convlstm1", (4, 4), 32, sequence=True, return_mode="all_steps"),
            _pool("pool1", (2, 2), SAME),
            _convlstm("convlstm2", (3, 3), 64, sequence=True, return_mode="last_step"),
            _pool("pool2", (2, 2), SAME),
            LayerSpec("dropout", "dropout1", rate=0.25),
        ] + _head(N, dense_activation)
        shape = (K, s, s)
    else:
        stack = [
            _convlstm("convlstm1", (4, 4, 4), 32, sequence=False),
            _pool("pool1", (2, 2, 2), SAME),
            _convlstm("convlstm2", (3, 3, 3), 64, sequence=False),
            _pool("pool2", (2, 2, 2), SAME),
            LayerSpec("dropout", "dropout1", rate=0.25),
        ] + _head(N, dense_activation, dropout_after_dense=0.5)
        shape = (K, s, s)
    spec = ModelSpec(name, shape, N, stack, lr, peephole)
    layer_shapes(spec)
    return spec


def _make_layer(ls, in_shape, rng, peephole):
    if ls.kind == "conv":
        geom = ConvGeometry(ls.kernel, ls.stride, ls.padding)
        return L.ConvLayer(ls.name, geom, in_shape[-1], ls.channels, rng, ls.activation)
    if ls.kind == "maxpool":
        return L.MaxPoolLayer(ls.name, ls.kernel, ls.stride, ls.padding)
    if ls.kind == "convlstm":
        return L.ConvLstmLayer(ls.name, ls.kernel, in_shape[-1], ls.channels, rng, ls.sequence, ls.return_mode, peephole)
    if ls.kind == "dropout":
        return L.DropoutLayer(ls.name, ls.rate)
    if ls.kind == "flatten":
        return L.FlattenLayer(ls.name)
    if ls.kind == "dense":
        if len(in_shape) != 1:
            raise DimensionError(f"{ls.name}: dense input must be flat, got {in_shape}")
        return L.DenseLayer(ls.name, in_shape[0], ls.channels, rng, ls.activation)
    raise ValueError(f"unknown layer kind {ls.kind!r}")


def _model_input_shape(spec):
    return tuple(spec.input_shape) + (1,)


def _instantiate(spec, rng):
    shape = _model_input_shape(spec)
    built = []
    for ls in spec.layers:
        layer = _make_layer(ls, shape, rng, spec.peephole)
        shape = layer.output_shape(shape)
        built.append((layer, shape))
    if shape != (spec.num_classes,):
        raise DimensionError(f"final layer width {shape} does not equal {spec.num_classes} classes")
    return built


def layer_shapes(spec):
    """``[(layer name, per-sample output shape), ...]`` starting with the input."""
    rng = np.random.default_rng(0)
    out = [("input", tuple(spec.input_shape))]
    out.extend((layer.name, shape) for layer, shape in _instantiate(spec, rng))
    return out


class Model:
    """Initialised network for a :class:`ModelSpec`.

    Parameters are drawn from ``numpy.random.default_rng(seed)`` in layer
    order, so ``(spec, seed)`` fixes the initial state.
    """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = int(seed)
        built = _instantiate(spec, np.random.default_rng(self.seed))
        self.layers = [layer for layer, _ in built]

    def params(self):
        out = {}
        for layer in self.layers:
            for key, value in layer.params().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def set_params(self, values):
        params = self.params()
        missing = set(params) - set(values)
        if missing:
            raise SpecMismatchError(f"missing parameters: {', '.join(sorted(missing))}")
        for name, target in params.items():
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != target.shape:
                raise SpecMismatchError(f"parameter {name} has shape {src.shape}, model expects {target.shape}")
            target[...] = src

    def prepare(self, patches):
        """Reshape ``[batch, s, s, K]`` patches to this model's input layout."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 3:
            patches = patches[..., None]
        s, k = self.spec.window, self.spec.components
        if patches.shape[1:] != (s, s, k):
            raise DimensionError(f"{self.spec.name} expects patches of shape ({s}, {s}, {k}), got {patches.shape[1:]}")
        if len(self.spec.input_shape) == 2:
            return patches
        return np.ascontiguousarray(np.moveaxis(patches, -1, 1))[..., None]

    def logits(self, patches, training=False, rng=None, record=None):
        x = self.prepare(patches)
        if record is not None:
            record.append(("input", x))
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
            if record is not None:
                record.append((layer.name, x))
        return x

    def forward(self, patches, training=False, rng=None):
        """Class probabilities, one row per patch."""
        return softmax(self.logits(patches, training, rng))

    def predict(self, patches, batch_size=64):
        """Predicted class ids ``1..N`` (inference mode)."""
        out = []
        for lo in range(0, len(patches), batch_size):
            out.append(np.argmax(self.forward(patches[lo : lo + batch_size]), axis=1) + 1)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def loss_and_grads(self, patches, labels, rng=None):
        """Mean cross-entropy on a batch and its gradient for every parameter.

        ``rng`` drives the dropout masks; a fresh unseeded generator is used when omitted.
        """
        rng = np.random.default_rng() if rng is None else rng
        probs = softmax(self.logits(patches, training=True, rng=rng))
        loss = cross_entropy(probs, labels)
        grad = softmax_xent_backward(probs, labels)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        grads = {}
        for layer in self.layers:
            for key, value in layer.grads.items():
                grads[f"{layer.name}.{key}"] = value
        return loss, grads, probs

    def load(self, checkpoint):
        if checkpoint.spec.to_dict() != self.spec.to_dict():
            raise SpecMismatchError(
                f"checkpoint holds a {checkpoint.spec.name} {tuple(checkpoint.spec.input_shape)} model, "
                f"expected {self.spec.name} {tuple(self.spec.input_shape)}"
            )
        self.set_params(checkpoint.params)
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint):
        return cls(checkpoint.spec, checkpoint.seed).load(checkpoint)


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    optimizer: AdamState = None
    seed: int = 0
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_bytes(c):
    header = {
        "spec": c.spec.to_dict(),
        "seed": c.seed,
        "meta": c.meta,
        "optimizer": c.optimizer.hyper() if c.optimizer is not None else None,
    }
    blobs = dict(sorted(c.params.items()))
    if c.optimizer is not None:
        for name in sorted(c.optimizer.m):
            blobs[f"adam.m/{name}"] = c.optimizer.m[name]
            blobs[f"adam.v/{name}"] = c.optimizer.v[name]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", c.version))
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(data):
    if len(data) < 16:
        raise FormatError("checkpoint truncated")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise FormatError(f"blob {name} runs past end of file")
            blobs[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).astype(np.float64).reshape(shape)
            pos += size
        if pos != len(body):
            raise FormatError("trailing bytes after last blob")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    spec = ModelSpec.from_dict(header["spec"])
    params = {k: v for k, v in blobs.items() if not k.startswith("adam.")}
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = AdamState(**header["optimizer"])
        for k, v in blobs.items():
            if k.startswith("adam.m/"):
                optimizer.m[k[7:]] = v
            elif k.startswith("adam.v/"):
                optimizer.v[k[7:]] = v
    expected = {name for layer, _ in _instantiate(spec, np.random.default_rng(0)) for name in
                (f"{layer.name}.{key}" for key in layer.params())}
    missing = expected - set(params)
    if missing:
        raise FormatError(f"checkpoint is missing blobs: {', '.join(sorted(missing))}")
    return Checkpoint(spec, params, optimizer, int(header.get("seed", 0)), header.get("meta", {}), version)


def atomic_write(path, data):
    """Write bytes to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(c, path):
    atomic_write(path, checkpoint_bytes(c))


def load_checkpoint(path, expected=None):
    """Read a checkpoint; ``expected`` (a model name) guards against mix-ups."""
    with open(path, "rb") as fh:
        c = parse_checkpoint(fh.read())
    if expected is not None and c.spec.name != expected:
        raise SpecMismatchError(f"checkpoint holds a {c.spec.name} model, expected {expected}")
    return c

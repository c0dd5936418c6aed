"""Hyperspectral cubes: file formats, PCA, patches, splits, synthetic scenes.

Binary layouts (all integers little-endian)::

    HSIC  magic "HSIC" | u32 version=1 | u32 W | u32 H | u32 D
          | W*H*D float64 in [band][row][col] order | u32 CRC-32 of the values
    HSIL  magic "HSIL" | u32 version=1 | u32 W | u32 H
          | W*H uint16 labels in [row][col] order | u32 CRC-32 of the labels

Label 0 marks unlabeled background; classes are numbered from 1.
"""

import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChecksumError, FormatError, SizeMismatchError, VersionError
from .models import atomic_write

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"HSIL"
FORMAT_VERSION = 1
MANIFEST_HEADER = "# hsiconvlstm split manifest v1"


@dataclass
class HsiCube:
    """Raster of ``height x width`` pixels with ``bands`` values each, stored ``[band, row, col]``."""

    values: np.ndarray
    wavelengths: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"cube values must be a non-empty [band, row, col] array, got {self.values.shape}")

    @property
    def bands(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    def pixels(self):
        """``[height * width, bands]`` matrix of spectra in row-major pixel order."""
        return self.values.reshape(self.bands, -1).T


@dataclass
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise ValueError("labels must fit in uint16")
        self.labels = labels.astype(np.uint16)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels) if c != 0)

    @property
    def num_classes(self):
        return int(self.labels.max()) if self.labels.size else 0


@dataclass
class PatchBatch:
    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class SplitManifest:
    seed: int
    policy: str
    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def coords(self, split):
        """``(coords [n, 2], labels [n])`` for ``"train"`` or ``"test"``, ordered by class."""
        table = self.train if split == "train" else self.test
        rows, labels = [], []
        for cls in sorted(table):
            rows.extend(table[cls])
            labels.extend([cls] * len(table[cls]))
        return np.array(rows, dtype=np.int64).reshape(-1, 2), np.array(labels, dtype=np.int64)

    def counts(self, split):
        table = self.train if split == "train" else self.test
        return {cls: len(table[cls]) for cls in sorted(table)}


def cube_bytes(cube):
    payload = np.ascontiguousarray(cube.values, dtype="<f8").tobytes()
    header = CUBE_MAGIC + struct.pack("<4I", FORMAT_VERSION, cube.width, cube.height, cube.bands)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def label_bytes(labels):
    payload = np.ascontiguousarray(labels.labels, dtype="<u2").tobytes()
    header = LABEL_MAGIC + struct.pack("<3I", FORMAT_VERSION, labels.width, labels.height)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def _check_payload(data, magic, header_size, payload_size, what):
    if len(data) < header_size:
        raise FormatError(f"{what} file truncated in header")
    if data[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported {what} version {version}")
    if len(data) != header_size + payload_size + 4:
        raise FormatError(f"{what} payload is {len(data) - header_size - 4} bytes, header implies {payload_size}")
    payload = data[header_size : header_size + payload_size]
    (crc,) = struct.unpack_from("<I", data, header_size + payload_size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{what} checksum mismatch")
    return payload


def parse_cube(data):
    if len(data) < 20:
        raise FormatError("cube file truncated in header")
    w, h, d = struct.unpack_from("<3I", data, 8)
    payload = _check_payload(data, CUBE_MAGIC, 20, 8 * w * h * d, "cube")
    return HsiCube(np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(d, h, w))


def parse_labels(data):
    if len(data) < 16:
        raise FormatError("label file truncated in header")
    w, h = struct.unpack_from("<2I", data, 8)
    payload = _check_payload(data, LABEL_MAGIC, 16, 2 * w * h, "label")
    return LabelMap(np.frombuffer(payload, dtype="<u2").astype(np.uint16).reshape(h, w))


def load_cube(path):
    with open(path, "rb") as fh:
        return parse_cube(fh.read())


def load_labels(path, cube=None):
    """Read an HSIL file; with ``cube`` given, its extents must match."""
    with open(path, "rb") as fh:
        labels = parse_labels(fh.read())
    if cube is not None:
        check_same_extent(cube, labels)
    return labels


def check_same_extent(cube, labels):
    if (cube.width, cube.height) != (labels.width, labels.height):
        raise SizeMismatchError(
            f"label map is {labels.width}x{labels.height} but cube is {cube.width}x{cube.height} (W x H)"
        )


def save_cube(cube, path):
    atomic_write(path, cube_bytes(cube))


def save_labels(labels, path):
    atomic_write(path, label_bytes(labels))


def _band_stats(cube, mask=None):
    x = cube.pixels() if mask is None else cube.pixels()[np.asarray(mask, dtype=bool).ravel()]
    if len(x) == 0:
        raise ValueError("no pixels selected for band statistics")
    return x.mean(axis=0), x.std(axis=0)


def _standardize(cube, mean, std):
    centered = cube.pixels() - mean
    out = np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)
    return HsiCube(out.T.reshape(cube.values.shape), cube.wavelengths)


def normalize(cube):
    """Scale every band to zero mean and unit variance; constant bands become zero."""
    return _standardize(cube, *_band_stats(cube))


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    unsorted. Iterates until the off-diagonal Frobenius norm drops below
    ``tol`` times the matrix norm.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a[~np.eye(n, dtype=bool)])
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ArithmeticError("Jacobi iteration did not converge")
    return np.diag(a).copy(), v


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    def transform(self, cube):
        proj = (cube.pixels() - self.mean) @ self.components
        return HsiCube(proj.T.reshape(self.components.shape[1], cube.height, cube.width))


def pca_fit(cube, K, mask=None):
    """Principal axes of the band covariance, ordered by decreasing variance.

    Each axis is signed so that its largest-magnitude loading is positive.
    ``mask`` (``[height, width]`` booleans) restricts the pixels the
    statistics are computed from; the default uses every pixel.
    """
    d = cube.bands
    if not 1 <= K <= d:
        raise ValueError(f"K must lie in 1..{d}, got {K}")
    x = cube.pixels() if mask is None else cube.pixels()[np.asarray(mask, dtype=bool).ravel()]
    if len(x) < 2:
        raise ValueError("PCA needs at least two pixels")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    if np.trace(cov) <= 0:
        raise ValueError("cube has zero total variance")
    vals, vecs = jacobi_eigh(cov)
    order = sorted(range(d), key=lambda i: (-vals[i], i))
    vals, vecs = vals[order], vecs[:, order]
    lead = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[lead, np.arange(d)] < 0, -1.0, 1.0)
    vecs = vecs * signs
    return PcaModel(mean, vecs[:, :K], np.maximum(vals, 0.0))


def pca_reduce(cube, K):
    """Project every pixel onto the top ``K`` principal axes."""
    return pca_fit(cube, K).transform(cube)


@dataclass
class Preprocessing:
    """Fitted band scaling followed by PCA; ``band_mean``/``band_std`` are ``None`` without scaling."""

    pca: PcaModel
    band_mean: np.ndarray = None
    band_std: np.ndarray = None

    @property
    def components(self):
        return self.pca.components.shape[1]

    def apply(self, cube):
        if cube.bands != self.pca.components.shape[0]:
            raise ValueError(f"cube has {cube.bands} bands, preprocessing was fit on {self.pca.components.shape[0]}")
        if self.band_mean is not None:
            cube = _standardize(cube, self.band_mean, self.band_std)
        return self.pca.transform(cube)

    def to_dict(self):
        out = {"pca_mean": self.pca.mean.tolist(), "components": self.pca.components.tolist(),
               "eigenvalues": self.pca.eigenvalues.tolist()}
        if self.band_mean is not None:
            out["band_mean"] = self.band_mean.tolist()
            out["band_std"] = self.band_std.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        pca = PcaModel(np.array(d["pca_mean"]), np.array(d["components"]), np.array(d["eigenvalues"]))
        if "band_mean" in d:
            return cls(pca, np.array(d["band_mean"]), np.array(d["band_std"]))
        return cls(pca)


def fit_preprocessing(cube, K, normalize_first=True, mask=None):
    """Fit scaling (optional) and PCA on the pixels selected by ``mask`` (all by default)."""
    if normalize_first:
        mean, std = _band_stats(cube, mask)
        return Preprocessing(pca_fit(_standardize(cube, mean, std), K, mask), mean, std)
    return Preprocessing(pca_fit(cube, K, mask))


def preprocess(cube, K, normalize_first=True, mask=None):
    return fit_preprocessing(cube, K, normalize_first, mask).apply(cube)


def windows(cube, coords, s):
    """``[n, s, s, bands]`` windows centred on ``coords`` (rows of ``(row, col)``), mirror-padded."""
    if s < 1 or s % 2 == 0:
        raise ValueError(f"window size must be odd, got {s}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) and (
        coords.min() < 0 or coords[:, 0].max() >= cube.height or coords[:, 1].max() >= cube.width
    ):
        raise IndexError("coordinate outside the raster")
    r = s // 2
    img = cube.values.transpose(1, 2, 0)
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect") if r else img
    view = sliding_window_view(padded, (s, s), axis=(0, 1))
    # view[row, col] is [bands, s, s] centred on (row, col) of the original raster
    return np.ascontiguousarray(view[coords[:, 0], coords[:, 1]].transpose(0, 2, 3, 1))


def extract_patches(cube, labels, coords, s):
    """Labeled training/test windows; every coordinate must carry a nonzero label."""
    check_same_extent(cube, labels)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    patches = windows(cube, coords, s)
    ids = labels.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    if np.any(ids == 0):
        raise ValueError("patch coordinates must be labeled pixels")
    return PatchBatch(patches, ids, coords)


def _policy_string(fraction, per_class):
    if (fraction is None) == (per_class is None):
        raise ValueError("give exactly one of fraction or per_class")
    if fraction is not None:
        if not 0 < fraction < 1:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        return f"fraction:{fraction!r}"
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    return f"per_class:{int(per_class)}"


def train_count(size, fraction=None, per_class=None):
    """Training samples taken from a class of ``size`` pixels, and a note if capped."""
    if fraction is not None:
        n = int(Fraction(repr(float(fraction))) * size + Fraction(1, 2))
        return min(max(n, 1), size), None
    if per_class < size:
        return per_class, None
    n = max(size - 1, 1)
    return n, f"requested {per_class} of {size} samples, took {n}"


def stratified_split(labels, fraction=None, per_class=None, seed=0):
    """Per-class random training picks without replacement; the rest is test.

    ``fraction`` rounds half up (at least one sample per class).
    """
    policy = _policy_string(fraction, per_class)
    rng = np.random.default_rng(seed)
    manifest = SplitManifest(int(seed), policy)
    lab = labels.labels
    for cls in labels.classes:
        rows, cols = np.nonzero(lab == cls)
        coords = np.stack([rows, cols], axis=1)
        n, note = train_count(len(coords), fraction, per_class)
        if note:
            manifest.notes.append(f"class {cls}: {note}")
        pick = np.zeros(len(coords), dtype=bool)
        pick[rng.permutation(len(coords))[:n]] = True
        manifest.train[cls] = [tuple(int(v) for v in c) for c in coords[pick]]
        manifest.test[cls] = [tuple(int(v) for v in c) for c in coords[~pick]]
    if not manifest.train:
        raise ValueError("label map has no labeled pixels")
    return manifest


def manifest_text(m):
    lines = [MANIFEST_HEADER, f"# seed={m.seed}", f"# policy={m.policy}"]
    lines += [f"# note={note}" for note in m.notes]
    lines.append("class,row,col,split")
    for cls in sorted(set(m.train) | set(m.test)):
        for split, table in (("train", m.train), ("test", m.test)):
            lines += [f"{cls},{r},{c},{split}" for r, c in table.get(cls, [])]
    return "\n".join(lines) + "\n"


def parse_manifest(text):
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError("not a split manifest (bad header line)")
    seed, policy, notes = None, None, []
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        if line.startswith("# seed="):
            seed = int(line[7:])
        elif line.startswith("# policy="):
            policy = line[9:]
        elif line.startswith("# note="):
            notes.append(line[7:])
        elif line == "class,row,col,split":
            body_start = i + 1
            break
        else:
            raise FormatError(f"line {i + 1}: unexpected header line {line!r}")
    if seed is None or policy is None or body_start is None:
        raise FormatError("manifest header lacks seed, policy or column line")
    m = SplitManifest(seed, policy, notes=notes)
    for i, line in enumerate(lines[body_start:], start=body_start + 1):
        parts = line.split(",")
        if len(parts) != 4 or parts[3] not in ("train", "test"):
            raise FormatError(f"line {i}: expected class,row,col,split")
        cls, r, c = (int(p) for p in parts[:3])
        table = m.train if parts[3] == "train" else m.test
        table.setdefault(cls, []).append((r, c))
    return m


def save_manifest(m, path):
    atomic_write(path, manifest_text(m).encode())


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def _synth_streams(seed):
    layout, signature, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(layout), np.random.default_rng(signature), np.random.default_rng(noise)


def synth_signatures(classes, bands, seed=0):
    """Class spectra used by :func:`synth_cube` for the same ``seed``, shape ``[classes, bands]``.

    Each is a flat baseline plus two Gaussian bumps of random position, width
    and (signed) height.
    """
    rng = _synth_streams(seed)[1]
    b = np.arange(bands, dtype=np.float64)
    sigs = np.empty((classes, bands))
    for k in range(classes):
        curve = np.full(bands, rng.uniform(0.2, 0.6))
        for _ in range(2):
            center = rng.uniform(0, bands - 1)
            width = rng.uniform(bands / 8, bands / 3)
            curve += rng.uniform(-0.5, 0.8) * np.exp(-((b - center) ** 2) / (2 * width**2))
        sigs[k] = curve
    return sigs


def synth_cube(classes=3, width=16, height=16, bands=8, noise=0.0, seed=0, layout="voronoi", regions=None):
    """Synthetic scene: class regions, one spectral signature per class, i.i.d. Gaussian noise.

    ``layout`` is ``"voronoi"`` (random seed points, at least one per class) or
    ``"blocks"`` (vertical stripes). Every pixel is labeled.
    """
    if classes < 1 or width < 1 or height < 1 or bands < 1:
        raise ValueError("classes, width, height and bands must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    layout_rng, _, noise_rng = _synth_streams(seed)
    if layout == "voronoi":
        n_seeds = regions or 2 * classes
        if n_seeds < classes or n_seeds > width * height:
            raise ValueError(f"need between {classes} and {width * height} Voronoi seeds")
        flat = layout_rng.choice(width * height, size=n_seeds, replace=False)
        pts = np.stack([flat // width, flat % width], axis=1)
        owner = np.arange(n_seeds) % classes + 1
        rr, cc = np.mgrid[0:height, 0:width]
        dist = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
        label = owner[np.argmin(dist, axis=-1)]
    elif layout == "blocks":
        if classes > width:
            raise ValueError("blocks layout needs width >= classes")
        label = np.broadcast_to((np.arange(width) * classes // width) + 1, (height, width))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    sigs = synth_signatures(classes, bands, seed)
    values = sigs[label - 1].transpose(2, 0, 1).copy()
    if noise > 0:
        values += noise_rng.normal(0.0, noise, size=values.shape)
    return HsiCube(values), LabelMap(label)

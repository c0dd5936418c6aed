"""Confusion matrices, OA / AA / kappa, and PPM classification maps."""

import colorsys
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth class, columns = predicted class (class ``k`` at index ``k-1``)."""

    counts: np.ndarray
    class_names: list = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = self.counts.shape[0]
        if self.counts.shape != (n, n) or (self.counts < 0).any():
            raise ValueError("confusion counts must be a square non-negative integer matrix")
        if self.class_names is None:
            self.class_names = [str(k) for k in range(1, n + 1)]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return self.counts.shape[0]


def confusion(pred, truth, num_classes=None, class_names=None):
    """Tally predictions against ground truth; pixels with truth 0 are skipped."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.size} predictions but {truth.size} ground-truth labels")
    keep = truth != 0
    pred, truth = pred[keep], truth[keep]
    n = num_classes or int(max(truth.max(initial=0), pred.max(initial=0)))
    if truth.size and (truth.min() < 1 or truth.max() > n or pred.min() < 1 or pred.max() > n):
        raise ValueError(f"labels must lie in 1..{n}")
    counts = np.bincount((truth - 1) * n + (pred - 1), minlength=n * n).reshape(n, n)
    return ConfusionMatrix(counts, class_names)


def _total(cm):
    total = cm.counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    return total


def oa(cm):
    """Overall accuracy: trace / total."""
    return float(np.trace(cm.counts) / _total(cm))


def per_class_accuracy(cm):
    rows = cm.counts.sum(axis=1)
    if (rows == 0).any():
        empty = [cm.class_names[i] for i in np.flatnonzero(rows == 0)]
        raise ValueError(f"no ground-truth samples for class(es) {', '.join(empty)}")
    return np.diag(cm.counts) / rows


def aa(cm):
    """Average accuracy: mean of per-class recalls."""
    _total(cm)
    return float(per_class_accuracy(cm).mean())


def kappa(cm):
    """Cohen's kappa, ``(p_o - p_e) / (1 - p_e)``."""
    total = _total(cm)
    p_o = np.trace(cm.counts) / total
    p_e = float(np.dot(cm.counts.sum(axis=1), cm.counts.sum(axis=0))) / float(total) ** 2
    if p_e == 1.0:
        raise ValueError("kappa is undefined when chance agreement equals 1")
    return float((p_o - p_e) / (1.0 - p_e))


def report(cm):
    """Machine-readable summary of a confusion matrix."""
    out = {"oa": oa(cm), "kappa": kappa(cm), "total": cm.total, "confusion": cm.counts.tolist()}
    rows = cm.counts.sum(axis=1)
    acc = np.divide(np.diag(cm.counts), rows, out=np.full(len(rows), np.nan), where=rows > 0)
    out["aa"] = float(np.nanmean(acc)) if (rows > 0).all() else None
    out["per_class"] = {name: (None if np.isnan(a) else float(a)) for name, a in zip(cm.class_names, acc)}
    return out


def summarize(reports):
    """Mean and (population) standard deviation of OA, AA and kappa over repeated runs."""
    out = {}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([r[key] for r in reports if r.get(key) is not None], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())} if vals.size else None
    out["runs"] = len(reports)
    return out


def text_report(rep, title="classification report"):
    lines = [title, f"  OA    {rep['oa']:.4f}"]
    lines.append(f"  AA    {rep['aa']:.4f}" if rep.get("aa") is not None else "  AA    n/a")
    lines.append(f"  kappa {rep['kappa']:.4f}")
    for name, acc in rep["per_class"].items():
        lines.append(f"  class {name:>3}  {'n/a' if acc is None else f'{acc:.4f}'}")
    return "\n".join(lines) + "\n"


BACKGROUND = (0, 0, 0)


def default_palette(num_classes):
    """``num_classes + 1`` RGB triplets; entry 0 is the background colour.

    Hues step by the golden angle so neighbouring class ids stay far apart.
    """
    colors = [BACKGROUND]
    for k in range(num_classes):
        hue = (k * 0.618033988749895) % 1.0
        value = 0.95 if k % 2 == 0 else 0.7
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, value)
        colors.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return colors


def render_map(pred, palette=None):
    """Binary PPM (P6) image of a ``[rows, cols]`` label raster, one pixel per cell."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise ValueError("prediction raster must be 2-D")
    top = int(pred.max(initial=0))
    if pred.size and pred.min() < 0:
        raise ValueError("label raster holds negative ids")
    if palette is None:
        palette = default_palette(top)
    if top >= len(palette):
        raise ValueError(f"palette has {len(palette)} entries, raster uses label {top}")
    lut = np.asarray(palette, dtype=np.uint8)
    header = f"P6\n{pred.shape[1]} {pred.shape[0]}\n255\n".encode("ascii")
    return header + lut[pred.astype(np.int64)].tobytes()

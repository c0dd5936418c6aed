"""Run configuration: JSON schema, defaults and consistency checks.

A config names a data source (cube and label files, or a synthetic scene),
a model, preprocessing, a split policy and a training schedule. Anything
left out takes the defaults below; :func:`effective_config` returns the
filled-in dict that a run echoes next to its outputs.
"""

import copy
import json
import os

import jsonschema

from .models import MODEL_NAMES
from .optim import DEFAULT_LEARNING_RATES

SPATIAL_ONLY = ("cnn2d", "sacl2dnn")

SYNTH_DEFAULTS = {
    "classes": 3,
    "width": 16,
    "height": 16,
    "bands": 8,
    "noise": 0.0,
    "seed": 0,
    "layout": "voronoi",
    "regions": None,
}

_pos_int = {"type": "integer", "minimum": 1}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "classes": _pos_int,
        "width": _pos_int,
        "height": _pos_int,
        "bands": _pos_int,
        "noise": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "layout": {"enum": ["voronoi", "blocks"]},
        "regions": {"type": ["integer", "null"], "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cube": {"type": "string"},
                "labels": {"type": "string"},
                "synth": SYNTH_SCHEMA,
            },
        },
        "model": {"enum": list(MODEL_NAMES)},
        "components": _pos_int,
        "window": _pos_int,
        "normalize": {"type": "boolean"},
        "pca_fit": {"enum": ["all", "train"]},
        "peephole": {"type": "boolean"},
        "dense_activation": {"enum": ["relu", None]},
        "conv_activation": {"enum": ["relu", None]},
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "per_class": {"type": ["integer", "null"], "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "manifest": {"type": ["string", "null"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "learning_rate": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "batch_size": _pos_int,
                "seed": {"type": "integer", "minimum": 0},
                "target_train_oa": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "repetitions": _pos_int,
        "deterministic": {"type": "boolean"},
        "threads": {"type": ["integer", "null"], "minimum": 1},
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is a dotted path, ``line`` a source line if known."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


def _field_line(text, path):
    """Best-effort source line of the last key in ``path`` (1-based), else ``None``."""
    if not text or not path:
        return None
    key = f'"{path[-1]}"'
    for n, line in enumerate(text.splitlines(), start=1):
        if key in line:
            return n
    return None


def parse_config(text):
    """Parse, validate and fill defaults. Raises :class:`ConfigError` with a field path."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return effective_config(raw, text)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def effective_config(raw, text=None):
    """Validated copy of ``raw`` with every default made explicit."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = [str(p) for p in err.absolute_path]
        raise ConfigError(err.message, field=".".join(path) or None, line=_field_line(text, path))

    cfg = copy.deepcopy(raw)
    data = cfg["data"]
    if "synth" in data:
        if "cube" in data or "labels" in data:
            raise ConfigError("give either synth or cube+labels, not both", field="data")
        data["synth"] = {**SYNTH_DEFAULTS, **data["synth"]}
    elif "cube" not in data or "labels" not in data:
        raise ConfigError("data needs both cube and labels, or a synth block", field="data")

    name = cfg["model"]
    default_k = 1 if name in SPATIAL_ONLY else 10
    cfg.setdefault("components", default_k)
    if name in SPATIAL_ONLY and cfg["components"] != 1:
        raise ConfigError(f"{name} uses only the first principal component; components must be 1",
                          field="components", line=_field_line(text, ["components"]))
    cfg.setdefault("window", 27)
    if cfg["window"] % 2 == 0:
        raise ConfigError("window must be odd", field="window", line=_field_line(text, ["window"]))
    cfg.setdefault("normalize", True)
    cfg.setdefault("pca_fit", "all")
    cfg.setdefault("peephole", True)
    cfg.setdefault("dense_activation", "relu")
    cfg.setdefault("conv_activation", "relu")

    split = {"fraction": None, "per_class": None, "seed": 0, "manifest": None, **cfg.get("split", {})}
    if split["manifest"] is None and (split["fraction"] is None) == (split["per_class"] is None):
        if split["fraction"] is None:
            split["fraction"] = 0.1
        else:
            raise ConfigError("give exactly one of fraction and per_class", field="split")
    cfg["split"] = split

    train = {"epochs": 2000, "learning_rate": None, "batch_size": 16, "seed": 0, "target_train_oa": None,
             **cfg.get("train", {})}
    if train["learning_rate"] is None:
        train["learning_rate"] = DEFAULT_LEARNING_RATES.get(name, 1e-3)
    cfg["train"] = train

    cfg.setdefault("repetitions", 1)
    cfg.setdefault("deterministic", False)
    cfg.setdefault("threads", None)
    return cfg


def resolve_paths(cfg, base):
    """Make data, manifest paths absolute relative to ``base`` and check they exist."""
    cfg = copy.deepcopy(cfg)
    for key in ("cube", "labels"):
        if key in cfg["data"]:
            cfg["data"][key] = _existing(os.path.join(base, cfg["data"][key]), f"data.{key}")
    if cfg["split"].get("manifest"):
        cfg["split"]["manifest"] = _existing(os.path.join(base, cfg["split"]["manifest"]), "split.manifest")
    return cfg


def _existing(path, field):
    path = os.path.abspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"{field}: no such file {path}")
    return path


def dumps(cfg):
    """Canonical JSON text (sorted keys) so echoed configs are byte-stable."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"

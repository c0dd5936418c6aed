"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it was built; otherwise
the numpy fallback in ``_kernels_py`` is used. Set
``HSICONVLSTM_BACKEND=python`` to force the fallback.
"""

import os

from . import _kernels_py

_compiled = None
if os.environ.get("HSICONVLSTM_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

kernels = _compiled if _compiled is not None else _kernels_py
NAME = "cython" if _compiled is not None else "python"


def available():
    """Names of the importable backends."""
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def get(name):
    if name == "python":
        return _kernels_py
    if name == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"kernel backend {name!r} is not available")


def use(name):
    """Switch the active backend for the whole process."""
    global kernels, NAME
    kernels = get(name)
    NAME = name

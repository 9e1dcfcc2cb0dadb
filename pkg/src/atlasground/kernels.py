"""Kernel backend selection.

The compiled extension is used when it imports; setting
``ATLASGROUND_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
sod_batch = _pykernels.sod_batch

if os.environ.get("ATLASGROUND_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        sod_batch = _ckernels.sod_batch


def get_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")

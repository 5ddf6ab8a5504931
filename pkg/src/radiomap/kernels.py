"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Setting
``RADIOMAP_PURE_PYTHON=1`` forces the numpy backend.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("RADIOMAP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
avgpool2 = _impl.avgpool2
avgpool2_backward = _impl.avgpool2_backward
# The separable matrix-product upsample beats the compiled loop (see
# benchmarks/bench_kernels.py), so it is used with either backend.
upsample2 = _kernels_py.upsample2
upsample2_backward = _kernels_py.upsample2_backward
prelu = _impl.prelu
prelu_backward = _impl.prelu_backward


def backends() -> dict:
    """All importable backends by name (for tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels  # type: ignore[attr-defined]

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out

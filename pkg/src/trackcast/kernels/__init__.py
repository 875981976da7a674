"""Hot numerical kernels: optimal assignment and rotated-box 3D IoU.

The compiled ``_core`` extension is used when it was built; otherwise the
pure-Python ``_pure`` module is used. Set ``TRACKCAST_PURE=1`` to force the
fallback. Both backends return identical results.
"""
from __future__ import annotations

import os

from . import _pure

try:
    if os.environ.get("TRACKCAST_PURE", "") not in ("", "0"):
        raise ImportError("pure backend forced")
    from . import _core  # type: ignore[attr-defined]
except ImportError:
    _core = None

BACKENDS = {"pure": _pure}
if _core is not None:
    BACKENDS["compiled"] = _core

BACKEND = "compiled" if _core is not None else "pure"
_impl = BACKENDS[BACKEND]

solve_assignment = _impl.solve_assignment
iou3d_matrix = _impl.iou3d_matrix

__all__ = ["BACKEND", "BACKENDS", "iou3d_matrix", "solve_assignment"]

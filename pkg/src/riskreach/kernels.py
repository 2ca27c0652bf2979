"""Backend selection for the geometry kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
pure-Python ``_kernels_py`` module. Set ``RISKREACH_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("RISKREACH_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

wrap_angle = _impl.wrap_angle
cast_ray = _impl.cast_ray
lidar_scan = _impl.lidar_scan
min_obstacle_distance = _impl.min_obstacle_distance
unicycle_rollout = _impl.unicycle_rollout
sweep_min_clearance = _impl.sweep_min_clearance
quantile_huber = _impl.quantile_huber

__all__ = [
    "BACKEND",
    "wrap_angle",
    "cast_ray",
    "lidar_scan",
    "min_obstacle_distance",
    "unicycle_rollout",
    "sweep_min_clearance",
    "quantile_huber",
]

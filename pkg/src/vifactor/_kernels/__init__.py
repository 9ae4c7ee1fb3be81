"""Numerical kernels for the inner loops (inertial propagation, patch tracking).

A compiled extension is preferred when it built successfully; the pure
numpy implementation in `_ref` computes the same recurrences and is used
as a fallback.  Set VIFACTOR_PURE_PY=1 to force the fallback.
"""

import os

from . import _ref

_impl = _ref
BACKEND = "python"
if not os.environ.get("VIFACTOR_PURE_PY"):
    try:
        from . import _core
        if hasattr(_core, "imu_propagate_batch"):
            _impl = _core
            BACKEND = "compiled"
    except ImportError:
        pass

imu_propagate_batch = _impl.imu_propagate_batch
iclk_level = _impl.iclk_level

__all__ = ["BACKEND", "imu_propagate_batch", "iclk_level", "_ref"]

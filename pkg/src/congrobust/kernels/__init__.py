"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``CONGROBUST_NUMBA`` is set to ``0``.  The selection happens once at
import; ``backend(name)`` hands out either implementation explicitly (used by
the cross-check tests and the benchmark).
"""

import os
from types import ModuleType

from . import _numpy

try:
    from . import _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    NUMBA_AVAILABLE = False

_want_numba = os.environ.get("CONGROBUST_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

BACKEND = "numba" if (NUMBA_AVAILABLE and _want_numba) else "numpy"
_impl: ModuleType = _numba if BACKEND == "numba" else _numpy

KERNELS = ("tile_index", "net_bboxes", "rudy_maps", "rudy_vjp", "route_demand", "im2col", "col2im")


def backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` ('numba' or 'numpy'); default is the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _numpy
    if name == "numba":
        if _numba is None:
            raise ImportError("numba backend requested but numba is not importable")
        return _numba
    raise ValueError(f"unknown kernel backend {name!r}")


tile_index = _impl.tile_index
net_bboxes = _impl.net_bboxes
rudy_maps = _impl.rudy_maps
rudy_vjp = _impl.rudy_vjp
route_demand = _impl.route_demand
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "NUMBA_AVAILABLE", "KERNELS", "backend", *KERNELS]

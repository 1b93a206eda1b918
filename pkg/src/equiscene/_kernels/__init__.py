"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension (``_core``, built from Cython) is preferred; if it is
missing (source checkout without a compiler), the pure-numpy implementation is
selected at import time. Both backends expose the same three entry points:

``closest_points``   batched exact point-to-triangle-soup closest points
``barrier_nd``       separating-plane barrier value/gradient/Hessian in (n, d)
``plane_newton``     damped Newton minimization of the barrier over (n, d)

``BACKEND`` names the active implementation ("compiled" or "numpy").
"""

try:
    from . import _core as _impl

    BACKEND = "compiled"
except ImportError:
    from . import _numpy as _impl

    BACKEND = "numpy"

from . import _numpy

closest_points = _impl.closest_points
barrier_nd = _impl.barrier_nd
plane_newton = _impl.plane_newton

__all__ = ["BACKEND", "closest_points", "barrier_nd", "plane_newton", "_numpy"]

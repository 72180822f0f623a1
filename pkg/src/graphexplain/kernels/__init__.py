"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy backend
is the fallback and the reference for equivalence tests. Set
GRAPHEXPLAIN_PURE_PY=1 to force the numpy backend.
"""

from __future__ import annotations

import os

from . import _numpy_backend

if os.environ.get("GRAPHEXPLAIN_PURE_PY") == "1":
    impl = _numpy_backend
    HAVE_COMPILED = False
else:
    try:
        from . import _compiled as impl  # type: ignore[no-redef]

        HAVE_COMPILED = True
    except ImportError:
        impl = _numpy_backend
        HAVE_COMPILED = False

BACKEND_NAME = impl.NAME

linear_forward = impl.linear_forward
linear_vjp = impl.linear_vjp
linear_lrp_eps = impl.linear_lrp_eps
linear_lrp_ab = impl.linear_lrp_ab
relu_forward = impl.relu_forward
relu_vjp = impl.relu_vjp
segment_sum = impl.segment_sum
segment_counts = impl.segment_counts
segment_mean = impl.segment_mean
segment_max = impl.segment_max
segment_broadcast = impl.segment_broadcast
segment_broadcast_mean = impl.segment_broadcast_mean
segment_max_route = impl.segment_max_route
segment_prop_lrp = impl.segment_prop_lrp
scatter_add_rows = impl.scatter_add_rows
proportional_pair = impl.proportional_pair

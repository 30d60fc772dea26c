"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``RISKAE_BACKEND``
environment variable:

  * ``numba``  - force the @njit kernels (ImportError if numba is missing)
  * ``numpy``  - force the vectorized numpy implementations
  * unset/``auto`` - numba if it imports, numpy otherwise

Both backends expose the same functions with identical signatures and
agree numerically to float64 round-off.  ``benchmarks/bench_kernels.py``
compares their throughput on training-sized shapes.
"""

import os

from . import numpy_impl

_requested = os.environ.get("RISKAE_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"RISKAE_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_impl
    ACTIVE_BACKEND = "numpy"
elif _requested == "numba":
    from . import numba_impl as _impl

    ACTIVE_BACKEND = "numba"
else:
    try:
        from . import numba_impl as _impl

        ACTIVE_BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        ACTIVE_BACKEND = "numpy"

masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
attention_fwd = _impl.attention_fwd
attention_bwd = _impl.attention_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd

__all__ = [
    "ACTIVE_BACKEND",
    "masked_softmax_fwd",
    "masked_softmax_bwd",
    "attention_fwd",
    "attention_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
]

"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``QARVD_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when importable). Both
backends produce bit-identical results: the float kernels fix the
summation order and the integer kernels are exact.
"""

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

_requested = os.environ.get("QARVD_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"QARVD_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = _numpy
if _requested == "numba":
    try:
        from . import _numba as _impl  # noqa: F811
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba unavailable, falling back to numpy kernels")
        _impl = _numpy

BACKEND = "numba" if _impl is not _numpy else "numpy"

matmul_strict = _impl.matmul_strict
channel_l2_norms = _impl.channel_l2_norms
quantize_codes = _impl.quantize_codes
int_gemm_groups = _impl.int_gemm_groups


def get_backend(name):
    """Return the kernel module for ``name`` regardless of the env flag."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba

        return _numba
    raise ValueError(f"unknown backend {name!r}")

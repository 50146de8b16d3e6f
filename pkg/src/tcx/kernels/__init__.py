"""Pairwise-kernel backend selection.

The compiled Cython module is used when it was built; otherwise the NumPy
fallback takes over transparently.  Set TCX_KERNELS=py to force the fallback
(the benchmark uses this to time both paths).
"""

import os

if os.environ.get("TCX_KERNELS", "").lower() in ("py", "numpy", "fallback"):
    from tcx.kernels import _pairwise_py as _impl

    BACKEND = "numpy"
else:
    try:
        from tcx.kernels import _pairwise as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from tcx.kernels import _pairwise_py as _impl

        BACKEND = "numpy"

kernel_row_sums = _impl.kernel_row_sums
hamming_matrix = _impl.hamming_matrix

__all__ = ["kernel_row_sums", "hamming_matrix", "BACKEND"]

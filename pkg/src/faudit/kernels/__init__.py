"""Hot numeric kernels with a compiled core and a pure numpy fallback.

Selection happens once at import.  When the Cython extension imported
cleanly, pooling and resize use it (an order of magnitude ahead of the
numpy versions), while the convolutions stay on the numpy im2col + BLAS
implementation, which benchmarks 2-3x faster than the typed loops
(benchmarks/bench_kernels.py has the numbers).  Set ``FAUDIT_PURE=1`` to
force the pure backend everywhere; ``BACKEND`` names the selection so
callers and the benchmark can report it.
"""

import os

from . import _pykernels

_impl = _pykernels
BACKEND = "pure"

if os.environ.get("FAUDIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _cykernels as _compiled

        _impl = _compiled
        BACKEND = "compiled"
    except ImportError:
        pass

conv2d_forward = _pykernels.conv2d_forward
conv2d_backward_input = _pykernels.conv2d_backward_input
conv2d_backward_kernel = _pykernels.conv2d_backward_kernel
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
bilinear_resize = _impl.bilinear_resize

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_kernel",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "bilinear_resize",
]

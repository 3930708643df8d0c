"""Kernel backend selection.

MAGIC_KERNELS=auto|cython|numpy picks the backend at import time. Both
backends produce bit-identical results; the compiled one only exists for
speed on the conv2d data-movement loops.
"""

import os

from . import numpy_backend

_choice = os.environ.get("MAGIC_KERNELS", "auto").lower()

if _choice == "numpy":
    backend = numpy_backend
elif _choice == "cython":
    from . import _cykernels as backend  # noqa: F401  hard failure on purpose
else:
    try:
        from . import _cykernels as backend
    except ImportError:
        backend = numpy_backend

im2col = backend.im2col
col2im = backend.col2im
BACKEND_NAME = backend.NAME

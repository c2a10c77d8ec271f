"""Pick the compiled kernels when importable, else the numpy fallback.

Set ``OSAQ_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

NAME = "python"
kernels = _pykernels

if os.environ.get("OSAQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        NAME = "cython"

jacobi_sweeps = kernels.jacobi_sweeps
compensate_columns = kernels.compensate_columns

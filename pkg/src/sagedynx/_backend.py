"""Backend selection for the hot kernels.

Prefers the compiled extension (_core) when it was built; falls back to the
numpy implementation (_core_py). Set SAGEDYNX_FORCE_PY=1 to force the
fallback (used by the parity test and the benchmark).
"""

from __future__ import annotations

import os

import numpy as np

from . import _core_py

if os.environ.get("SAGEDYNX_FORCE_PY"):
    _impl = _core_py
    HAVE_COMPILED = False
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        HAVE_COMPILED = True
    except ImportError:
        _impl = _core_py
        HAVE_COMPILED = False


def se_kernel(A, B, inv_ls, sv: float):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    inv_ls = np.ascontiguousarray(inv_ls, dtype=np.float64)
    return _impl.se_kernel(A, B, inv_ls, float(sv))


def se_kernel_diag(A, sv: float):
    A = np.ascontiguousarray(A, dtype=np.float64)
    return _impl.se_kernel_diag(A, float(sv))

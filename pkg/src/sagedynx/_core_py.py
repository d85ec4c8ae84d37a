"""Pure-numpy implementations of the hot kernels.

Mirrors _core.pyx exactly; _backend.py picks whichever is importable.
"""

from __future__ import annotations

import numpy as np


def se_kernel(A: np.ndarray, B: np.ndarray, inv_ls: np.ndarray, sv: float) -> np.ndarray:
    """Squared-exponential kernel matrix.

    K[i, j] = sv * exp(-0.5 * sum_d ((A[i,d] - B[j,d]) * inv_ls[d])^2)

    A: (n, d), B: (m, d), inv_ls: (d,) reciprocal lengthscales. Returns (n, m).
    """
    As = A * inv_ls
    Bs = B * inv_ls
    d2 = (
        (As * As).sum(axis=1)[:, None]
        + (Bs * Bs).sum(axis=1)[None, :]
        - 2.0 * (As @ Bs.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return sv * np.exp(-0.5 * d2)


def se_kernel_diag(A: np.ndarray, sv: float) -> np.ndarray:
    """Diagonal of the squared-exponential kernel: constant sv."""
    return np.full(A.shape[0], float(sv))

"""Pure-numpy reference implementation of the hot filter kernel."""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def filter_interval(y: np.ndarray, H: np.ndarray, L: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Run the measurement-update recursion over one sync interval.

    Parameters
    ----------
    y : (M, p) innovations-ready measurements (already offset-referenced).
    H : (M, p, nx) output matrix per sample.
    L : (M, nx, p) precomputed gain per sample.
    x0 : (nx,) state entering the interval.

    Returns
    -------
    (M + 1, nx) trajectory; row s is the estimate after s updates.
    """
    y = np.asarray(y, dtype=float)
    H = np.asarray(H, dtype=float)
    L = np.asarray(L, dtype=float)
    M = y.shape[0]
    nx = x0.shape[0]
    X = np.empty((M + 1, nx))
    X[0] = x0
    x = np.array(x0, dtype=float)
    for t in range(M):
        x = x + L[t] @ (y[t] - H[t] @ x)
        X[t + 1] = x
    return X

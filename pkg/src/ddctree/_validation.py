"""Input checks shared by the estimators."""

from __future__ import annotations

import os

import numpy as np
from sklearn.utils import check_array

from .panel import Panel, load_panel


def check_panel(panel) -> Panel:
    """Return ``panel`` as a :class:`Panel`; paths are read with :func:`load_panel`."""
    if isinstance(panel, Panel):
        return panel
    if isinstance(panel, (str, os.PathLike)):
        return load_panel(panel)
    raise TypeError(f"expected a Panel or a path to a panel CSV, got {type(panel).__name__}")


def check_covariates(Q, n_dims: int | None = None) -> np.ndarray:
    """2-D finite float array, optionally with a fixed number of columns."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q.reshape(1, -1)
    Q = check_array(Q, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=0)
    if n_dims is not None and Q.shape[1] != n_dims:
        raise ValueError(f"expected {n_dims} covariate columns, got {Q.shape[1]}")
    return Q


def check_probability_rows(P, atol: float = 1e-9, what: str = "transition") -> np.ndarray:
    """Rows must be nonnegative and sum to one (all-zero rows are allowed)."""
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < -atol):
        raise ValueError(f"{what} matrix has negative entries")
    s = P.sum(axis=-1)
    bad = (np.abs(s - 1.0) > atol) & (s != 0.0)
    if np.any(bad):
        raise ValueError(f"{what} matrix row {int(np.flatnonzero(bad.ravel())[0])} does not sum to 1")
    return P

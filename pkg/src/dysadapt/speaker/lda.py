"""Linear discriminant analysis projection."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
import scipy.linalg

from dysadapt.errors import ConfigurationError


def scatter_matrices(features: np.ndarray, labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Within-class and between-class scatter, each normalised by the frame count."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, dim = x.shape
    mean = x.mean(axis=0)
    within = np.zeros((dim, dim))
    between = np.zeros((dim, dim))
    for c in np.unique(labels):
        xc = x[labels == c]
        mu = xc.mean(axis=0)
        centered = xc - mu
        within += centered.T @ centered
        diff = (mu - mean)[:, None]
        between += len(xc) * (diff @ diff.T)
    return within / n, between / n


def lda_fit(features: np.ndarray, frame_labels: Sequence[int], out_dim: int) -> np.ndarray:
    """Return an ``h x out_dim`` projection, columns by decreasing discriminant eigenvalue.

    Solves ``S_b v = lambda S_w v``. A singular within-class scatter is
    ridged by ``1e-6 * trace / h`` with a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(frame_labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ConfigurationError(f"features {x.shape} and labels ({len(labels)}) disagree")
    n_classes = len(np.unique(labels))
    dim = x.shape[1]
    if n_classes < 2:
        raise ConfigurationError("LDA needs at least two classes")
    if not 1 <= out_dim <= dim:
        raise ConfigurationError(f"out_dim {out_dim} must lie in 1..{dim}")
    within, between = scatter_matrices(x, labels)
    try:
        np.linalg.cholesky(within)
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.trace(within) / dim
        warnings.warn(f"within-class scatter is singular; adding ridge {ridge:.3g}", RuntimeWarning, stacklevel=2)
        within = within + ridge * np.eye(dim)
    vals, vecs = scipy.linalg.eigh(between, within)
    order = np.argsort(vals)[::-1][:out_dim]
    return vecs[:, order]

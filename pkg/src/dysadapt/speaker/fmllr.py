"""Per-speaker feature-space MLLR against a diagonal GMM.

The transform ``W = [A | b]`` maps ``x -> A x + b``. Estimation alternates
an E-step (component posteriors of the currently transformed frames) with
exact row-by-row maximisation of the auxiliary function

    Q(W) = beta * log|det A| + sum_i (w_i k_i - 0.5 * w_i G_i w_i^T)

where, with ``xi_t = [x_t; 1]``,

    G_i = sum_m (1 / var_mi) sum_t gamma_mt xi_t xi_t^T
    k_i = sum_m (mu_mi / var_mi) sum_t gamma_mt xi_t^T
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from dysadapt.errors import EstimationError
from dysadapt.speaker.gmm import GaussianMixture


@dataclass
class SpeakerTransform:
    speaker: str
    W: np.ndarray  # d x (d+1)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        d = self.W.shape[0]
        if self.W.shape != (d, d + 1):
            raise EstimationError(f"transform for {self.speaker!r} must be d x (d+1), got {self.W.shape}")

    @property
    def A(self) -> np.ndarray:
        return self.W[:, :-1]

    @property
    def b(self) -> np.ndarray:
        return self.W[:, -1]

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def identity(cls, speaker: str, dim: int) -> "SpeakerTransform":
        return cls(speaker, np.hstack([np.eye(dim), np.zeros((dim, 1))]))

    def inverse(self) -> "SpeakerTransform":
        a_inv = np.linalg.inv(self.A)
        return SpeakerTransform(self.speaker, np.hstack([a_inv, (-a_inv @ self.b)[:, None]]))


@dataclass
class FmllrStats:
    beta: float
    G: np.ndarray  # d x (d+1) x (d+1)
    K: np.ndarray  # d x (d+1)
    history: list[float] = field(default_factory=list)


def fmllr_apply(features: np.ndarray, transform: SpeakerTransform | np.ndarray) -> np.ndarray:
    W = transform.W if isinstance(transform, SpeakerTransform) else np.asarray(transform)
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise EstimationError(f"feature width {x.shape[-1]} does not match transform width {W.shape[0]}")
    return x @ W[:, :-1].T + W[:, -1]


def transformed_loglik(features: np.ndarray, transform: SpeakerTransform, gmm: GaussianMixture) -> float:
    """Log-likelihood of the original frames under the GMM pulled back through ``W`` (Jacobian included)."""
    _, logdet = np.linalg.slogdet(transform.A)
    return gmm.loglik(fmllr_apply(features, transform)) + features.shape[0] * logdet


def accumulate_stats(features: np.ndarray, posteriors: np.ndarray, gmm: GaussianMixture) -> FmllrStats:
    x = np.asarray(features, dtype=np.float64)
    xi = np.hstack([x, np.ones((x.shape[0], 1))])
    inv_var = 1.0 / gmm.variances  # M x d
    # frame weights per output dimension: sum_m gamma_mt / var_mi
    frame_w = posteriors @ inv_var  # N x d
    G = np.einsum("ti,tj,tk->ijk", frame_w, xi, xi)
    K = (posteriors @ (gmm.means * inv_var)).T @ xi  # d x (d+1)
    return FmllrStats(float(posteriors.sum()), G, K)


def auxiliary_objective(W: np.ndarray, stats: FmllrStats) -> float:
    _, logdet = np.linalg.slogdet(W[:, :-1])
    quad = np.einsum("ij,ijk,ik->", W, stats.G, W)
    return float(stats.beta * logdet + np.sum(W * stats.K) - 0.5 * quad)


def _cofactor_row(A: np.ndarray, i: int) -> np.ndarray:
    """Row ``i`` of the cofactor matrix of ``A``, extended with a trailing zero."""
    d = A.shape[0]
    cof = np.empty(d)
    minor_rows = np.delete(A, i, axis=0)
    for j in range(d):
        cof[j] = (-1) ** (i + j) * np.linalg.det(np.delete(minor_rows, j, axis=1)) if d > 1 else 1.0
    return np.append(cof, 0.0)


def _row_objective(w: np.ndarray, p: np.ndarray, G: np.ndarray, k: np.ndarray, beta: float) -> float:
    det = float(w @ p)
    if det == 0.0:
        return -np.inf
    return beta * np.log(abs(det)) + float(w @ k) - 0.5 * float(w @ G @ w)


def update_rows(W: np.ndarray, stats: FmllrStats) -> np.ndarray:
    """One pass of exact row maximisations; appends Q after each row to ``stats.history``."""
    W = W.copy()
    d = W.shape[0]
    for i in range(d):
        G = stats.G[i]
        ridge = 0.0
        try:
            np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            ridge = 1e-6 * np.trace(G) / (d + 1)
            warnings.warn(f"fMLLR statistics for row {i} are singular; adding ridge {ridge:.3g}", RuntimeWarning, stacklevel=2)
        G_inv = np.linalg.inv(G + ridge * np.eye(d + 1))
        p = _cofactor_row(W[:, :-1], i)
        k = stats.K[i]
        e1 = float(p @ G_inv @ p)
        e2 = float(p @ G_inv @ k)
        disc = e2 * e2 + 4 * e1 * stats.beta
        best_w, best_q = None, -np.inf
        if e1 > 0 and disc >= 0:
            for alpha in ((-e2 + np.sqrt(disc)) / (2 * e1), (-e2 - np.sqrt(disc)) / (2 * e1)):
                cand = (alpha * p + k) @ G_inv
                q = _row_objective(cand, p, G, k, stats.beta)
                if q > best_q:
                    best_w, best_q = cand, q
        if best_w is None:
            warnings.warn(f"fMLLR row {i}: no admissible root, keeping previous row", RuntimeWarning, stacklevel=2)
        else:
            W[i] = best_w
        stats.history.append(auxiliary_objective(W, stats))
    return W


def fmllr_estimate(
    features: np.ndarray,
    gmm: GaussianMixture,
    iters: int = 10,
    speaker: str = "",
    row_passes: int = 1,
    init: SpeakerTransform | None = None,
    tol: float = 0.0,
    return_trace: bool = False,
):
    """Estimate a speaker transform by EM over GMM posteriors.

    With ``return_trace`` the result is ``(transform, traces)`` where each
    entry of ``traces`` lists the auxiliary objective before and after every
    row update of one iteration. Iteration stops early once the per-frame
    log-likelihood gain of an iteration drops below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if d != gmm.dim:
        raise EstimationError(f"speaker {speaker!r}: feature width {d} != GMM width {gmm.dim}")
    if n < d + 1:
        raise EstimationError(f"speaker {speaker!r} has {n} frames; fMLLR in {d} dims needs at least {d + 1}")
    W = (init or SpeakerTransform.identity(speaker, d)).W.copy()
    traces: list[list[float]] = []
    previous = None
    for _ in range(iters):
        gamma = gmm.posteriors(fmllr_apply(x, W))
        stats = accumulate_stats(x, gamma, gmm)
        stats.history.append(auxiliary_objective(W, stats))
        for _ in range(row_passes):
            W = update_rows(W, stats)
        traces.append(stats.history)
        if tol > 0:
            current = transformed_loglik(x, SpeakerTransform(speaker, W), gmm) / n
            if previous is not None and current - previous < tol:
                break
            previous = current
    transform = SpeakerTransform(speaker, W)
    if abs(np.linalg.det(transform.A)) <= 1e-12:
        raise EstimationError(f"speaker {speaker!r}: estimated transform is singular")
    return (transform, traces) if return_trace else transform

"""Diagonal-covariance Gaussian mixture trained with EM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from dysadapt.errors import ConfigurationError

LOG_2PI = np.log(2 * np.pi)


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, d)
    variances: np.ndarray  # (M, d)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """``log w_m + log N(x_t; mu_m, diag var_m)`` as an ``N x M`` matrix."""
        x = np.atleast_2d(x)
        inv = 1.0 / self.variances
        # expand the quadratic form so the cost is two matmuls
        quad = (x * x) @ inv.T - 2 * x @ (self.means * inv).T + (self.means**2 * inv).sum(axis=1)
        log_norm = -0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))
        return np.log(self.weights) + log_norm - 0.5 * quad

    def frame_loglik(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_loglik(x), axis=1)

    def loglik(self, x: np.ndarray) -> float:
        return float(self.frame_loglik(x).sum())

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        comp = self.component_loglik(x)
        return np.exp(comp - logsumexp(comp, axis=1, keepdims=True))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comps] + noise * np.sqrt(self.variances[comps]), comps


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 20) -> np.ndarray:
    """Lloyd iterations from a k-means++ seeding; returns ``k x d`` centres."""
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    d2 = ((x - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centres.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    c = np.array(centres)
    for _ in range(iters):
        dist = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
        assign = dist.argmin(axis=1)
        new = np.array([x[assign == j].mean(axis=0) if np.any(assign == j) else c[j] for j in range(k)])
        if np.array_equal(new, c):
            break
        c = new
    return c


def gmm_fit(
    features: np.ndarray,
    n_components: int,
    iters: int = 20,
    seed: int = 0,
    var_floor_scale: float = 1e-4,
    return_history: bool = False,
):
    """EM training from a k-means initialisation.

    Variances are floored at ``var_floor_scale`` times the global variance.
    A component whose occupancy vanishes is re-seeded by splitting the
    component with the largest total variance.
    """
    x = np.asarray(features, dtype=np.float64)
    n, dim = x.shape
    if n < 10 * n_components:
        raise ConfigurationError(f"gmm_fit needs at least {10 * n_components} frames for M={n_components}, got {n}")
    rng = np.random.default_rng(seed)
    floor = var_floor_scale * x.var(axis=0)
    floor = np.maximum(floor, 1e-12)

    means = kmeans(x, n_components, rng) if n_components > 1 else x.mean(axis=0, keepdims=True)
    dist = ((x[:, None, :] - means[None]) ** 2).sum(axis=2)
    assign = dist.argmin(axis=1)
    weights = np.empty(n_components)
    variances = np.empty((n_components, dim))
    for m in range(n_components):
        xm = x[assign == m]
        if len(xm) < 2:
            xm = x
        weights[m] = max(np.mean(assign == m), 1.0 / n)
        variances[m] = np.maximum(xm.var(axis=0), floor)
    gmm = GaussianMixture(weights / weights.sum(), means, variances)

    history = [gmm.loglik(x)]
    for _ in range(iters):
        gamma = gmm.posteriors(x)
        occ = gamma.sum(axis=0)
        empty = occ < 1e-10
        if np.any(empty):
            _reseed(gmm, empty, floor)
            gamma = gmm.posteriors(x)
            occ = gamma.sum(axis=0)
        means = (gamma.T @ x) / occ[:, None]
        second = (gamma.T @ (x * x)) / occ[:, None]
        variances = np.maximum(second - means**2, floor)
        gmm = GaussianMixture(occ / n, means, variances)
        history.append(gmm.loglik(x))
    return (gmm, history) if return_history else gmm


def _reseed(gmm: GaussianMixture, empty: np.ndarray, floor: np.ndarray) -> None:
    for m in np.flatnonzero(empty):
        donor = int(np.argmax(np.where(empty, -np.inf, gmm.variances.sum(axis=1))))
        offset = np.sqrt(gmm.variances[donor])
        gmm.means[m] = gmm.means[donor] + offset
        gmm.means[donor] = gmm.means[donor] - offset
        gmm.variances[m] = np.maximum(gmm.variances[donor], floor)
        gmm.weights[donor] *= 0.5
        gmm.weights[m] = gmm.weights[donor]
    gmm.weights /= gmm.weights.sum()

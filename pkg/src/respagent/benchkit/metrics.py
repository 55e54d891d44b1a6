"""Distribution and style metrics over toy audio embeddings."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import InvalidArgument

log = logging.getLogger(__name__)

EPS = 1e-6


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    sym = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    if (vals < 0).any():
        log.info("clamping %d negative eigenvalues (min %.3g)", int((vals < 0).sum()), vals.min())
        vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_stats(emb) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(emb, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise InvalidArgument("need at least two embeddings of dimension >= 1")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    E = cov_a.shape[0]
    if np.linalg.matrix_rank(cov_a) < E or np.linalg.matrix_rank(cov_b) < E:
        log.info("degenerate covariance; adding %.0e * I", EPS)
        cov_a = cov_a + EPS * np.eye(E)
        cov_b = cov_b + EPS * np.eye(E)
    # sqrt(A B) shares its trace with sqrt(A^1/2 B A^1/2), which is symmetric
    ra = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(ra @ cov_b @ ra)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    d = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return max(d, 0.0)


def frechet_distance(emb_a, emb_b) -> float:
    """Frechet distance between Gaussians fitted to two embedding sets."""
    mu_a, cov_a = gaussian_stats(emb_a)
    mu_b, cov_b = gaussian_stats(emb_b)
    if mu_a.shape != mu_b.shape:
        raise InvalidArgument("embedding dimensions differ")
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


def style_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgument("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def style_embedding(features) -> np.ndarray:
    """Time-mean of per-frame toy features."""
    return np.asarray(features, dtype=np.float64).mean(axis=0)

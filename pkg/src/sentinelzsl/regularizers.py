"""Distribution-alignment penalties the sentinel scores generated batches with.

Each regularizer compares a batch of generated feature rows against a private
batch of real rows and returns ``(value, grad)`` where ``grad`` is the exact
derivative of the value with respect to the generated rows. Only the value
and that gradient ever cross the wire -- never the real rows themselves.
"""
from __future__ import annotations

import numpy as np

from .nncore import DimensionError, as_matrix

# Keeps fitted variances bounded away from zero so the KL term stays smooth
# even for (nearly) constant batches.
VARIANCE_FLOOR = 1e-6

BANDWIDTH_SCALES = (1.0, 2.0, 4.0, 8.0, 16.0)


def _check_pair(generated: np.ndarray, real: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = as_matrix(generated)
    r = as_matrix(real)
    if g.shape[1] != r.shape[1]:
        raise DimensionError(
            f"generated width {g.shape[1]} != real width {r.shape[1]}"
        )
    if g.shape[0] < 2 or r.shape[0] < 2:
        raise ValueError(
            f"need at least 2 rows per batch, got {g.shape[0]} generated / {r.shape[0]} real"
        )
    return g, r


def kl_moments(generated, real) -> tuple[float, np.ndarray]:
    """KL divergence between diagonal Gaussians fitted by moments.

    Fits N(mean, diag(var)) to each batch (population moments, floored
    variances) and returns KL(generated || real) plus its gradient w.r.t.
    the generated rows. Identical batches give exactly (0, zeros).
    """
    g, r = _check_pair(generated, real)
    n = g.shape[0]
    mu_g, mu_r = g.mean(axis=0), r.mean(axis=0)
    var_g = g.var(axis=0) + VARIANCE_FLOOR
    var_r = r.var(axis=0) + VARIANCE_FLOOR

    ratio = var_g / var_r
    diff = mu_g - mu_r
    value = 0.5 * float(np.sum(ratio + diff * diff / var_r - 1.0 - np.log(ratio)))

    # d/dmu_g = diff/var_r, d/dvar_g = 0.5*(1/var_r - 1/var_g); chain through
    # the batch moments: dmu/dg = 1/n, dvar/dg = 2*(g - mu_g)/n.
    grad = (diff / var_r) / n + (0.5 * (1.0 / var_r - 1.0 / var_g)) * (2.0 / n) * (g - mu_g)
    return value, grad


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def median_heuristic_bandwidths(generated, real) -> tuple[float, ...]:
    """Median pairwise distance of the pooled rows, times fixed scale factors."""
    pooled = np.vstack([as_matrix(generated), as_matrix(real)])
    d2 = _sq_dists(pooled, pooled)
    off_diag = np.sqrt(d2[~np.eye(len(pooled), dtype=bool)])
    base = float(np.median(off_diag)) if off_diag.size else 0.0
    if base <= 0.0:
        base = 1.0
    return tuple(base * s for s in BANDWIDTH_SCALES)


def mmd_gaussian(generated, real, bandwidths=None) -> tuple[float, np.ndarray]:
    """Biased squared MMD with a sum of Gaussian kernels, plus its gradient.

    k(x, y) = sum_b exp(-|x-y|^2 / (2 b^2)); bandwidths default to the
    median heuristic over the pooled rows. The estimator keeps the diagonal
    terms, so it is non-negative and exactly zero for identical batches.
    """
    g, r = _check_pair(generated, real)
    if bandwidths is None:
        bandwidths = median_heuristic_bandwidths(g, r)
    m, n = g.shape[0], r.shape[0]

    d_gg = _sq_dists(g, g)
    d_rr = _sq_dists(r, r)
    d_gr = _sq_dists(g, r)

    value = 0.0
    grad = np.zeros_like(g)
    for b in bandwidths:
        if b <= 0:
            raise ValueError("bandwidths must be positive")
        denom = 2.0 * b * b
        k_gg = np.exp(-d_gg / denom)
        k_rr = np.exp(-d_rr / denom)
        k_gr = np.exp(-d_gr / denom)
        value += k_gg.mean() + k_rr.mean() - 2.0 * k_gr.mean()

        # d k(x,y)/dx = k * (y - x) / b^2; the gg block contributes twice by
        # symmetry, the rr block not at all.
        inv_b2 = 1.0 / (b * b)
        grad += (2.0 / (m * m)) * inv_b2 * (k_gg @ g - k_gg.sum(axis=1)[:, None] * g)
        grad += (2.0 / (m * n)) * inv_b2 * (k_gr.sum(axis=1)[:, None] * g - k_gr @ r)
    return float(value), grad


def no_regularizer(generated, real) -> tuple[float, np.ndarray]:
    """Null penalty: always (0, zeros); keeps call sites uniform."""
    g, _ = _check_pair(generated, real)
    return 0.0, np.zeros_like(g)


REGULARIZERS = {
    "kl": kl_moments,
    "mmd": mmd_gaussian,
    "none": no_regularizer,
}


def get_regularizer(kind: str):
    """Look up a regularizer by name; raises ValueError for unknown kinds."""
    try:
        return REGULARIZERS[kind]
    except KeyError:
        raise ValueError(
            f"unknown regularizer {kind!r}; expected one of {sorted(REGULARIZERS)}"
        ) from None

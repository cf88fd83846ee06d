"""Discriminative clustering: mutual information between target inputs and predicted labels."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROW_TOL = 1e-9


def validate_predictions(probs) -> np.ndarray:
    """Check that ``probs`` is an (n, K) matrix of probability rows."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"expected a nonempty (n, K) prediction matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("prediction rows must be finite and nonnegative")
    bad = np.abs(p.sum(axis=1) - 1.0) > ROW_TOL
    if bad.any():
        raise ValueError(f"prediction row {int(np.argmax(bad))} does not sum to 1")
    return p


def _mean_entropy(p: np.ndarray) -> float:
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=-1).mean())


def mutual_information(probs) -> float:
    """I = H(mean row) - mean row entropy, natural log. Larger is better."""
    p = validate_predictions(probs)
    return _mean_entropy(p.mean(axis=0)[None]) - _mean_entropy(p)


def target_prediction_probs(logits) -> np.ndarray:
    """Row-wise softmax of (n_t, K) logits as a plain prediction matrix."""
    x = ad.as_tensor(logits).values
    if x.ndim != 2:
        raise ValueError(f"expected (n_t, K) logits, got shape {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mutual_information_loss(logits: Tensor) -> Tensor:
    """Differentiable mutual information of softmax(logits) over a target batch (n_t, K).

    Row entropies use log-softmax so confident rows stay finite.
    """
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"expected (n_t, K) logits, got shape {logits.shape}")
    logp = ad.log_softmax(logits, axis=1)
    p = ad.softmax(logits, axis=1)
    neg_cond = ad.mean(ad.reduce_sum(ad.mul(p, logp), axis=1))  # -(1/n) sum H(p_j)
    marginal_h = ad.scale(ad.reduce_sum(ad.xlogx(ad.mean(p, axis=0))), -1.0)
    return ad.add(marginal_h, neg_cond)

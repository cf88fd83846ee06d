"""Transferability Adaptation Module: the final layer, whose class-token
attention row is reweighted by per-patch transferabilities."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import apply_norm, mlp, self_attention


def patch_transferability(probs) -> np.ndarray:
    """Binary entropy (base 2) of patch source-probabilities, elementwise in [0, 1].

    The result is a plain array: no gradient flows back through it.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("patch_transferability: probabilities must lie in [0, 1]")
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        hp = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
        hq = np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    return np.clip(hp + hq, 0.0, 1.0)


def class_row_weights(t: np.ndarray) -> np.ndarray:
    """[1; t] per image: the class self-connection is never suppressed."""
    t = np.asarray(t, dtype=np.float64)
    return np.concatenate([np.ones(t.shape[:-1] + (1,)), t], axis=-1)


def tsa(q_class, keys, values, t) -> np.ndarray:
    """Transferable self-attention for the class-token query of one head.

    ``keys``/``values`` are (R+1, d_head) with the class token at row 0.
    Returns (softmax(q K^T / sqrt(d_head)) * [1; t]) @ V, unnormalised.
    """
    q_class, keys, values, t = (np.asarray(a, dtype=np.float64) for a in (q_class, keys, values, t))
    if t.shape != (keys.shape[0] - 1,):
        raise ValueError(f"tsa: {t.shape[0] if t.ndim else 0} transferabilities for {keys.shape[0] - 1} patches")
    scores = keys @ q_class / math.sqrt(q_class.shape[-1])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return (w * class_row_weights(t)) @ values


def t_msa(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, t: np.ndarray):
    """Multi-head attention where every head's class row is weighted by the same ``t``.

    Patch-token rows use plain attention. ``t`` has shape (B, R).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (x.shape[0], x.shape[1] - 1):
        raise ValueError(f"t_msa: transferabilities {t.shape} do not match tokens {x.shape[:2]}")
    return self_attention(x, p, prefix, heads, class_row_weights(t))


def tam_block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, t: np.ndarray, normed: Tensor | None = None):
    """x' = T-MSA(LN(x), t) + x; out = MLP(LN(x')) + x'. Returns (out, raw attention).

    ``normed`` lets the caller pass LN(x) it already computed.
    """
    if normed is None:
        normed = apply_norm(x, p, f"{prefix}.ln1")
    a, attn = t_msa(normed, p, f"{prefix}.attn", heads, t)
    x = ad.add(x, a)
    return ad.add(x, mlp(apply_norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp")), attn

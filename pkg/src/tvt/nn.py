"""Parameter initialisation and the transformer sub-layers shared by ViT and TAM."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(values, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def linear_params(rng, fan_in: int, fan_out: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": param(trunc_normal(rng, (fan_in, fan_out)), f"{prefix}.w"),
        f"{prefix}.b": param(np.zeros(fan_out), f"{prefix}.b"),
    }


def norm_params(dim: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.g": param(np.ones(dim), f"{prefix}.g"),
        f"{prefix}.b": param(np.zeros(dim), f"{prefix}.b"),
    }


def block_params(rng, dim: int, hidden: int, prefix: str) -> dict[str, Tensor]:
    """Weights of one pre-norm transformer layer (attention + MLP)."""
    p: dict[str, Tensor] = {}
    p.update(norm_params(dim, f"{prefix}.ln1"))
    for proj in ("q", "k", "v", "o"):
        p.update(linear_params(rng, dim, dim, f"{prefix}.attn.{proj}"))
    # a key bias shifts every score in a query's row equally, so softmax ignores it
    del p[f"{prefix}.attn.k.b"]
    p.update(norm_params(dim, f"{prefix}.ln2"))
    p.update(linear_params(rng, dim, hidden, f"{prefix}.mlp.fc1"))
    p.update(linear_params(rng, hidden, dim, f"{prefix}.mlp.fc2"))
    return p


def apply_linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.linear(x, p[f"{prefix}.w"], p.get(f"{prefix}.b"))


def apply_norm(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], LN_EPS)


def mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return apply_linear(ad.gelu(apply_linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def self_attention(
    x: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    heads: int,
    class_row_weights: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product self-attention over tokens ``x`` (B, N, d).

    ``class_row_weights`` (B, N), when given, multiplies the softmaxed
    attention row of token 0 in every head, with no renormalisation. It is
    treated as a constant. Returns the projected output and the raw
    attention probabilities (B, heads, N, N).
    """
    b, n, d = x.shape
    if d % heads:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    q = _split_heads(apply_linear(x, p, f"{prefix}.q"), heads)
    k = _split_heads(apply_linear(x, p, f"{prefix}.k"), heads)
    v = _split_heads(apply_linear(x, p, f"{prefix}.v"), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    attn = ad.softmax(scores, axis=-1)
    weights = attn
    if class_row_weights is not None:
        if class_row_weights.shape != (b, n):
            raise ValueError(f"class row weights {class_row_weights.shape} do not match tokens {(b, n)}")
        mask = np.ones((b, 1, n, n))
        mask[:, 0, 0, :] = class_row_weights
        weights = ad.mul(attn, Tensor(mask))
    out = ad.matmul(weights, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return apply_linear(out, p, f"{prefix}.o"), attn.values

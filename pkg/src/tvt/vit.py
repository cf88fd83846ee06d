"""A small Vision Transformer backbone with a classification head."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import tam
from .autodiff import Tensor
from .nn import apply_linear, apply_norm, block_params, linear_params, mlp, norm_params, param, self_attention, trunc_normal


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    classes: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2 (last layer is TAM), got {self.depth}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (B, H, W, C) or (H, W, C) images into row-major, channel-last flattened patches.

    Returns (B, R, P*P*C) (or (R, P*P*C) for a single image).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, c = images.shape
    if h != w or h % patch_size:
        raise ConfigError(f"image {h}x{w} cannot be split into {patch_size}x{patch_size} patches")
    g = h // patch_size
    out = images.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, g * g, patch_size * patch_size * c)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, r, _ = patches.shape
    g = int(round(r**0.5))
    if g * g != r:
        raise ConfigError(f"{r} patches do not form a square grid")
    out = patches.reshape(b, g, g, patch_size, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, g * patch_size, g * patch_size, channels)
    return out[0] if single else out


def transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, class_row_weights=None):
    """Pre-norm layer: x' = MSA(LN(x)) + x; out = MLP(LN(x')) + x'. Returns (out, attention)."""
    a, attn = self_attention(apply_norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads, class_row_weights)
    x = ad.add(x, a)
    return ad.add(x, mlp(apply_norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp")), attn


def msa(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int):
    """Standard multi-head self-attention (no transferability weighting)."""
    return self_attention(x, p, prefix, heads)


@dataclass
class Features:
    """Outputs of :meth:`ViT.forward_features` for a batch."""

    class_state: Tensor  # (B, d)
    patch_states: Tensor  # (B, R, d)
    patch_probs: Tensor | None  # (B, R) patch discriminator source-probabilities
    transferability: np.ndarray  # (B, R)
    class_attention: np.ndarray  # (B, R+1) head-averaged raw class-token row in the last layer
    effective_attention: np.ndarray  # (B, R+1) after transferability weighting
    attentions: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, N, N)


class ViT:
    """Patch embedding, class token, L-1 standard layers, a TAM layer and a linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        p: dict[str, Tensor] = {}
        p.update(linear_params(rng, cfg.patch_dim, d, "embed"))
        p["cls_token"] = param(np.zeros((1, 1, d)), "cls_token")
        p["pos_embed"] = param(trunc_normal(rng, (1, cfg.num_patches + 1, d)), "pos_embed")
        for i in range(cfg.depth):
            p.update(block_params(rng, d, cfg.hidden_dim, f"blocks.{i}"))
        p.update(norm_params(d, "norm"))
        p.update(linear_params(rng, d, cfg.classes, "head"))
        self.params = p

    def embed(self, patches) -> Tensor:
        """Tokens = [class token; patch @ W_e + b_e] + position embeddings, shape (B, R+1, d)."""
        patches = ad.as_tensor(patches)
        if patches.shape[1:] != (self.cfg.num_patches, self.cfg.patch_dim):
            raise ConfigError(f"expected patches (B, {self.cfg.num_patches}, {self.cfg.patch_dim}), got {patches.shape}")
        b = patches.shape[0]
        tokens = apply_linear(patches, self.params, "embed")
        cls = ad.add(self.params["cls_token"], Tensor(np.zeros((b, 1, self.cfg.embed_dim))))
        return ad.add(ad.concat([cls, tokens], axis=1), self.params["pos_embed"])

    def forward_features(
        self,
        images: np.ndarray,
        patch_scorer: Callable[[Tensor], Tensor] | None = None,
        use_tam: bool = True,
        t_override: np.ndarray | None = None,
    ) -> Features:
        """Embed, run layers 1..L-1, then the TAM layer (or a standard layer if ``use_tam`` is off), then the final LN.

        ``patch_scorer`` maps the normalised patch tokens entering the last
        layer to source-probabilities; transferabilities are their binary
        entropies. ``t_override`` replaces the transferabilities outright.
        """
        cfg = self.cfg
        x = self.embed(patchify(images, cfg.patch_size))
        attentions = []
        for i in range(cfg.depth - 1):
            x, attn = transformer_block(x, self.params, f"blocks.{i}", cfg.heads)
            attentions.append(attn)

        last = f"blocks.{cfg.depth - 1}"
        b, r = x.shape[0], cfg.num_patches
        probs = None
        if use_tam:
            normed = apply_norm(x, self.params, f"{last}.ln1")
            if patch_scorer is not None:
                probs = patch_scorer(ad.getitem(normed, (slice(None), slice(1, None))))
            if t_override is not None:
                t = np.broadcast_to(np.asarray(t_override, dtype=float), (b, r)).copy()
            elif probs is not None:
                t = tam.patch_transferability(probs.values)
            else:
                t = np.ones((b, r))
            x, attn = tam.tam_block(x, self.params, last, cfg.heads, t, normed=normed)
        else:
            t = np.ones((b, r))
            x, attn = transformer_block(x, self.params, last, cfg.heads)
        attentions.append(attn)

        x = apply_norm(x, self.params, "norm")
        raw = attn[:, :, 0, :].mean(axis=1)
        weights = tam.class_row_weights(t)
        return Features(
            class_state=ad.getitem(x, (slice(None), 0)),
            patch_states=ad.getitem(x, (slice(None), slice(1, None))),
            patch_probs=probs,
            transferability=t,
            class_attention=raw,
            effective_attention=raw * weights if use_tam else raw.copy(),
            attentions=attentions,
        )

    def classify(self, class_state: Tensor) -> Tensor:
        """Affine head G_c: (B, d) -> (B, K) logits."""
        return apply_linear(class_state, self.params, "head")

"""Domain discriminators, gradient reversal and the two adversarial losses.

Domain labels follow the source = 1, target = 0 convention. Each loss is
the discriminator's BCE; features reach the discriminator through a
gradient reversal layer, so one backward pass trains the discriminator to
minimise the loss and the feature extractor to maximise it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grl
from .nn import apply_linear, linear_params

__all__ = [
    "Discriminator",
    "DiscriminatorConfig",
    "domain_bce",
    "global_domain_loss",
    "grl",
    "grl_schedule",
    "patch_domain_loss",
]


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()

    @classmethod
    def default(cls, input_dim: int) -> "DiscriminatorConfig":
        return cls(input_dim, (input_dim, max(input_dim // 2, 1)))


class Discriminator:
    """MLP with GELU hidden layers and a single sigmoid output (source-probability)."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator, prefix: str):
        self.cfg = cfg
        self.prefix = prefix
        dims = (cfg.input_dim, *cfg.hidden_dims, 1)
        self.layers = [f"{prefix}.fc{i}" for i in range(len(dims) - 1)]
        self.params: dict[str, Tensor] = {}
        for name, a, b in zip(self.layers, dims[:-1], dims[1:]):
            self.params.update(linear_params(rng, a, b, name))

    def __call__(self, x: Tensor) -> Tensor:
        """Source-probabilities for features ``x`` (..., d); returns shape (...)."""
        for name in self.layers[:-1]:
            x = ad.gelu(apply_linear(x, self.params, name))
        logit = apply_linear(x, self.params, self.layers[-1])
        return ad.sigmoid(ad.reshape(logit, logit.shape[:-1]))


def domain_bce(probs: Tensor, domain_labels) -> Tensor:
    """Mean BCE of source-probabilities (n, ...) against per-example domain labels (n,)."""
    y = np.asarray(domain_labels, dtype=np.float64)
    if probs.shape[0] != y.shape[0]:
        raise ValueError(f"{probs.shape[0]} predictions for {y.shape[0]} domain labels")
    y = y.reshape((-1,) + (1,) * (probs.ndim - 1))
    return ad.binary_cross_entropy(probs, y)


def global_domain_loss(disc: Discriminator, class_states: Tensor, domain_labels, lam: float) -> Tensor:
    """BCE of the global discriminator on gradient-reversed class-token states (n, d)."""
    if class_states.shape[0] == 0:
        raise ValueError("global_domain_loss: empty batch")
    return domain_bce(disc(grl(class_states, lam)), domain_labels)


def patch_domain_loss(disc: Discriminator, patch_states: Tensor, domain_labels, lam: float) -> tuple[Tensor, Tensor]:
    """BCE of the shared patch discriminator averaged over all n*R patches.

    Returns ``(loss, probs)`` with probs of shape (n, R).
    """
    if patch_states.shape[0] == 0:
        raise ValueError("patch_domain_loss: empty batch")
    probs = disc(grl(patch_states, lam))
    return domain_bce(probs, domain_labels), probs


def grl_schedule(progress: float) -> float:
    """Reversal strength ramp 2 / (1 + exp(-10 p)) - 1 for training progress p in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0

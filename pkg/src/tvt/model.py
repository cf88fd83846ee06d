"""The full network: ViT backbone with TAM, classifier head and both domain discriminators."""

from __future__ import annotations

import numpy as np

from .adversarial import Discriminator, DiscriminatorConfig
from .autodiff import Tensor, grl
from .vit import Features, ModelConfig, ViT


class TVTModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.vit = ViT(cfg, rng)
        disc_cfg = DiscriminatorConfig.default(cfg.embed_dim)
        self.d_global = Discriminator(disc_cfg, rng, "d_global")
        self.d_patch = Discriminator(disc_cfg, rng, "d_patch")

    def parameters(self) -> dict[str, Tensor]:
        return {**self.vit.params, **self.d_global.params, **self.d_patch.params}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            p.values = np.array(arrays[name], dtype=np.float64)

    def features(
        self, images: np.ndarray, lam: float = 0.0, use_tam: bool = True, t_override=None
    ) -> Features:
        """Backbone forward; the patch discriminator sees normalised patch tokens through a GRL."""
        scorer = (lambda f: self.d_patch(grl(f, lam))) if use_tam else None
        return self.vit.forward_features(images, scorer, use_tam=use_tam, t_override=t_override)

    def predict(self, images: np.ndarray, use_tam: bool = True, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack of images, computed without recording a tape."""
        out = []
        for start in range(0, len(images), batch_size):
            f = self.features(images[start : start + batch_size], use_tam=use_tam)
            out.append(self.vit.classify(f.class_state).values)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.classes))

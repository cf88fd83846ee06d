"""Objective composition, SGD with momentum, the warmup-cosine schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .adversarial import domain_bce, global_domain_loss, grl_schedule
from .autodiff import ContractError, Tape, Tensor
from .data import DomainBatch, LabeledImageSet, paired_batches
from .dcm import mutual_information_loss
from .model import TVTModel
from .vit import ConfigError, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    use_tam: bool = True
    peak_lr: float = 0.03
    warmup_steps: int = 100
    total_steps: int = 1000
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch_source: int = 16
    batch_target: int = 16
    seed: int = 0
    eval_interval: int = 250

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "peak_lr", "momentum", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.total_steps and self.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    def ablation(self, name: str) -> "TrainConfig":
        """The three rows of the module ablation: source_only, tam, tam_dcm."""
        if name == "source_only":
            return replace(self, alpha=0.0, beta=0.0, gamma=0.0, use_tam=False)
        if name == "tam":
            return replace(self, gamma=0.0, use_tam=True)
        if name == "tam_dcm":
            return replace(self, use_tam=True)
        raise ValueError(f"unknown ablation {name!r}")


@dataclass
class StepRecord:
    step: int
    lr: float
    lam: float
    l_clc: float
    l_dis: float
    l_pat: float
    mi: float
    acc: float | None = None

    def to_json(self) -> str:
        row = {
            "step": self.step,
            "lr": self.lr,
            "lambda": self.lam,
            "l_clc": self.l_clc,
            "l_dis": self.l_dis,
            "l_pat": self.l_pat,
            "mi": self.mi,
        }
        if self.acc is not None:
            row["acc"] = self.acc
        return json.dumps(row)


# ---------------------------------------------------------------------------
# objective


def total_objective(
    model: TVTModel, batch: DomainBatch, cfg: TrainConfig, lam: float, t_override=None
) -> tuple[Tensor, dict[str, Tensor]]:
    """L_clc + alpha L_dis + beta L_pat - gamma I on one paired batch.

    Both domain losses are the discriminators' BCE computed through gradient
    reversal, so a single backward pass trains discriminators and features
    in opposite directions. Returns the loss and its individual terms.
    """
    feats = model.features(batch.images, lam=lam, use_tam=cfg.use_tam, t_override=t_override)
    logits = model.vit.classify(feats.class_state)
    ns = batch.n_s
    y_d = batch.domain_labels
    terms: dict[str, Tensor] = {
        "l_clc": ad.cross_entropy(ad.getitem(logits, slice(0, ns)), batch.source_labels),
        "l_dis": global_domain_loss(model.d_global, feats.class_state, y_d, lam),
        "mi": mutual_information_loss(ad.getitem(logits, slice(ns, None))),
    }
    if feats.patch_probs is not None:
        terms["l_pat"] = domain_bce(feats.patch_probs, y_d)

    loss = terms["l_clc"]
    if cfg.alpha:
        loss = ad.add(loss, ad.scale(terms["l_dis"], cfg.alpha))
    if cfg.beta and "l_pat" in terms:
        loss = ad.add(loss, ad.scale(terms["l_pat"], cfg.beta))
    if cfg.gamma:
        loss = ad.sub(loss, ad.scale(terms["mi"], cfg.gamma))
    return loss, terms


def lr_schedule(step: int, peak: float = 0.03, warmup: int = 500, total: int = 10000) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    step = min(max(step, 0), total)
    if warmup and step <= warmup:
        return peak * step / warmup
    span = total - warmup
    if span <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


class SGD:
    """Heavy-ball momentum: v <- mu v + g; theta <- theta - lr v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.values) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for {len(missing)} parameters, e.g. {missing[0]}")
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if lr:
                p.values -= lr * v


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in params.values() if p.grad is not None])))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return total


def trainable(model: TVTModel, cfg: TrainConfig) -> dict[str, Tensor]:
    """Parameters that receive gradient under ``cfg``."""
    params = dict(model.vit.params)
    if cfg.alpha:
        params.update(model.d_global.params)
    if cfg.beta and cfg.use_tam:
        params.update(model.d_patch.params)
    return params


# ---------------------------------------------------------------------------
# loop


def evaluate(model: TVTModel, data: LabeledImageSet, use_tam: bool = True) -> float:
    """Top-1 accuracy of argmax logits."""
    if len(data) == 0:
        raise ValueError("evaluate: empty split")
    pred = model.predict(data.images, use_tam=use_tam).argmax(axis=1)
    return float((pred == data.labels).mean())


@dataclass
class FitResult:
    model: TVTModel
    records: list[StepRecord]
    target_accuracy: float
    checkpoints: list[Path]


def train_steps(model: TVTModel, cfg: TrainConfig, batches: Iterator[DomainBatch]) -> Iterator[StepRecord]:
    """Run ``cfg.total_steps`` optimisation steps, yielding one record per step."""
    params = trainable(model, cfg)
    opt = SGD(params, cfg.momentum)
    for step in range(1, cfg.total_steps + 1):
        batch = next(batches)
        lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps)
        lam = grl_schedule(step / cfg.total_steps)
        opt.zero_grad()
        with Tape() as tape:
            tape.watch(params)
            loss, terms = total_objective(model, batch, cfg, lam)
            ad.backward(loss, tape)
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr)
        values = {k: float(v.item()) for k, v in terms.items()}
        for k, v in values.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"step {step}: {k} became {v}")
        yield StepRecord(step, lr, lam, values["l_clc"], values["l_dis"], values.get("l_pat", 0.0), values["mi"])


def fit(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    source: LabeledImageSet,
    target_train: LabeledImageSet,
    target_test: LabeledImageSet | None = None,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train from a seeded initialisation; write metrics.jsonl and checkpoints into ``out_dir`` if given.

    Target labels in ``target_train`` are never read.
    """
    model = TVTModel(model_cfg, seed=cfg.seed)
    batches = paired_batches(source, target_train, cfg.batch_source, cfg.batch_target, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    ckpts: list[Path] = []
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w")
        ckpts.append(checkpoint.save(out / "step_0.ckpt", model.parameters(), model_cfg))
    records: list[StepRecord] = []
    try:
        for rec in train_steps(model, cfg, batches):
            if target_test is not None and (rec.step % cfg.eval_interval == 0 or rec.step == cfg.total_steps):
                rec.acc = evaluate(model, target_test, cfg.use_tam)
                log.info("step %d  l_clc %.4f  target acc %.4f", rec.step, rec.l_clc, rec.acc)
            records.append(rec)
            if metrics is not None:
                metrics.write(rec.to_json() + "\n")
                if rec.step % cfg.eval_interval == 0 and rec.step != cfg.total_steps:
                    ckpts.append(checkpoint.save(out / f"step_{rec.step}.ckpt", model.parameters(), model_cfg))
    finally:
        if metrics is not None:
            metrics.close()
    if out is not None:
        ckpts.append(checkpoint.save(out / "final.ckpt", model.parameters(), model_cfg))
    if target_test is None:
        acc = float("nan")
    elif records and records[-1].acc is not None:
        acc = records[-1].acc
    else:
        acc = evaluate(model, target_test, cfg.use_tam)
    return FitResult(model, records, acc, ckpts)



def objective_grad_check(
    model: TVTModel,
    batch: DomainBatch,
    cfg: TrainConfig,
    lam: float = 1.0,
    samples: int | None = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> ad.GradCheckReport:
    """Finite-difference check of the full objective's tape gradient.

    Gradient reversal means the tape does not differentiate one scalar: the
    feature extractor sees ``-lam`` times the domain-loss gradients while the
    discriminators see them unchanged. The oracle therefore differences
    ``L_clc + s (alpha L_dis + beta L_pat) - gamma I`` with ``s = 1`` for
    discriminator coordinates and ``s = -lam`` elsewhere. Transferabilities
    are frozen at their current values, matching the stop-gradient.
    """
    params = trainable(model, cfg)
    t0 = model.features(batch.images, use_tam=True).transferability if cfg.use_tam else None

    def f() -> Tensor:
        return total_objective(model, batch, cfg, lam, t_override=t0)[0]

    def oracle(name: str):
        s = 1.0 if name.startswith("d_") else -lam

        def value() -> float:
            _, terms = total_objective(model, batch, cfg, lam, t_override=t0)
            v = {k: t.item() for k, t in terms.items()}
            return v["l_clc"] + s * (cfg.alpha * v["l_dis"] + cfg.beta * v.get("l_pat", 0.0)) - cfg.gamma * v["mi"]

        return value

    return ad.grad_check(f, params, h=h, samples=samples, rng=np.random.default_rng(seed), oracle=oracle)

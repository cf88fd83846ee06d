"""Command-line entry point: ``tvt train | eval | gradcheck | attn-dump``.

Exit codes: 0 success, 1 verification failure, 2 user or config error,
3 environment or I/O error.
"""

from __future__ import annotations

import os

# BLAS reads its thread count once, at numpy import
if os.environ.get("TVT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["TVT_THREADS"])

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .data import DataError, DomainBatch, DomainStyle, LabeledImageSet, SynthConfig, load_idx, load_idx_images, synth_domain_pair
from .model import TVTModel
from .trainer import TrainConfig, evaluate, fit, objective_grad_check
from .vit import ConfigError, ModelConfig

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("tvt")


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# run configuration

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
STYLE_KEYS = tuple(f.name for f in fields(DomainStyle))
SYNTH_KEYS = ("train_per_domain", "test_per_domain", "data_seed")
PATH_KEYS = tuple(
    f"{split}_{kind}"
    for split in ("source_train", "target_train", "target_test")
    for kind in ("images", "labels")
)
ALL_KEYS = (
    MODEL_KEYS
    + TRAIN_KEYS
    + SYNTH_KEYS
    + tuple(f"{dom}_{k}" for dom in ("source", "target") for k in STYLE_KEYS)
    + PATH_KEYS
)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    paths: dict

    def resolved_lines(self) -> list[str]:
        rows = [(k, getattr(self.model, k)) for k in MODEL_KEYS]
        rows += [(k, getattr(self.train, k)) for k in TRAIN_KEYS]
        rows += [
            ("train_per_domain", self.synth.train_per_domain),
            ("test_per_domain", self.synth.test_per_domain),
            ("data_seed", self.synth.seed),
        ]
        for dom in ("source", "target"):
            style = getattr(self.synth, dom)
            rows += [(f"{dom}_{k}", getattr(style, k)) for k in STYLE_KEYS]
        rows += [(k, self.paths[k]) for k in PATH_KEYS if k in self.paths]
        return [f"{k} = {_fmt(v)}" for k, v in rows]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise UsageError(f"{source}:{lineno}: duplicate config key {key!r}")
        out[key] = value
    return out


def build_config(raw: dict[str, str]) -> RunConfig:
    """Apply defaults and validate every value."""
    m0, t0, s0 = ModelConfig(), TrainConfig(), SynthConfig()

    def pick(keys, obj, rename=None):
        kw = {}
        for k in keys:
            field_name = (rename or {}).get(k, k)
            if k in raw:
                kw[field_name] = _coerce(k, raw[k], getattr(obj, field_name))
        return kw

    def checked(key_hint, ctor, kw):
        try:
            return ctor(**kw)
        except (ConfigError, DataError) as exc:
            raise UsageError(f"{key_hint}: {exc}") from None

    model = checked("model config", ModelConfig, pick(MODEL_KEYS, m0))
    train = checked("train config", TrainConfig, pick(TRAIN_KEYS, t0))
    styles = {}
    for dom in ("source", "target"):
        base = getattr(s0, dom)
        kw = {k: _coerce(f"{dom}_{k}", raw[f"{dom}_{k}"], getattr(base, k)) for k in STYLE_KEYS if f"{dom}_{k}" in raw}
        styles[dom] = checked(f"{dom}_background", lambda **k: replace(base, **k), kw)
    synth_kw = pick(SYNTH_KEYS, s0, {"data_seed": "seed"})
    synth = checked(
        "synthetic data config",
        SynthConfig,
        dict(synth_kw, classes=model.classes, image_size=model.image_size, **styles),
    )
    if model.channels != 1:
        raise UsageError("channels: only single-channel images are supported by the data sources")
    paths = {k: raw[k] for k in PATH_KEYS if k in raw}
    if paths:
        need = ("source_train_images", "source_train_labels", "target_train_images")
        missing = [k for k in need if k not in paths]
        if missing:
            raise UsageError(f"config key {missing[0]!r} is required when IDX paths are given")
        if ("target_test_images" in paths) != ("target_test_labels" in paths):
            raise UsageError("config keys 'target_test_images' and 'target_test_labels' must be given together")
    return RunConfig(model, train, synth, paths)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        raw = parse_config_text(p.read_text(), str(p))
    for k, v in (overrides or {}).items():
        raw[k] = v
    return build_config(raw)


def apply_ablation_flags(cfg: TrainConfig, args) -> TrainConfig:
    if getattr(args, "source_only", False):
        return cfg.ablation("source_only")
    if getattr(args, "no_tam", False):
        cfg = replace(cfg, use_tam=False, beta=0.0)
    if getattr(args, "no_dcm", False):
        cfg = replace(cfg, gamma=0.0)
    return cfg


# ---------------------------------------------------------------------------
# data


def _check_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"data file not found: {p}")
    return p


def load_data(cfg: RunConfig) -> dict[str, LabeledImageSet | None]:
    """IDX files when paths are configured, otherwise the synthetic corpus."""
    if not cfg.paths:
        return synth_domain_pair(cfg.synth)
    p = cfg.paths
    out: dict[str, LabeledImageSet | None] = {
        "source_train": load_idx(_check_file(p["source_train_images"]), _check_file(p["source_train_labels"]), "source"),
        "target_test": None,
    }
    if "target_train_labels" in p:
        out["target_train"] = load_idx(_check_file(p["target_train_images"]), _check_file(p["target_train_labels"]), "target")
    else:
        out["target_train"] = _load_unlabelled(_check_file(p["target_train_images"]))
    if "target_test_images" in p:
        out["target_test"] = load_idx(
            _check_file(p["target_test_images"]), _check_file(p["target_test_labels"]), "target", "test"
        )
    side = cfg.model.image_size
    for name, ds in out.items():
        if ds is not None and ds.images.shape[1:] != (side, side, cfg.model.channels):
            raise UsageError(f"{name}: images are {ds.images.shape[1:]}, config expects {(side, side, cfg.model.channels)}")
    return out


def _load_unlabelled(path: Path) -> LabeledImageSet:
    # placeholder labels; training never reads target labels
    images = load_idx_images(path)
    return LabeledImageSet(images, np.zeros(len(images), dtype=np.int64), "target")


def load_model(path: str, cfg: ModelConfig | None = None) -> TVTModel:
    """Model from a checkpoint; raises CheckpointError if it disagrees with ``cfg``."""
    ck_cfg, arrays = checkpoint.load(_check_file(path))
    if cfg is not None and ck_cfg != cfg:
        diff = [f.name for f in fields(ModelConfig) if getattr(cfg, f.name) != getattr(ck_cfg, f.name)]
        raise CheckpointError(f"checkpoint model config differs from run config in {diff}")
    model = TVTModel(ck_cfg)
    checkpoint.validate(arrays, model.parameters())
    model.load_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = replace(cfg, train=apply_ablation_flags(cfg.train, args))
    lines = cfg.resolved_lines()
    print("\n".join(lines))
    out = Path(args.out)
    data = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")
    res = fit(cfg.model, cfg.train, data["source_train"], data["target_train"], data.get("target_test"), out)
    summary = {"steps": len(res.records)}
    if data.get("target_test") is not None:
        summary["target_accuracy"] = res.target_accuracy
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    cfg = replace(cfg, train=apply_ablation_flags(cfg.train, args))
    model = load_model(args.checkpoint, cfg.model)
    data = load_data(cfg)
    test = data.get("target_test")
    if test is None:
        raise UsageError("no target test split: set target_test_images and target_test_labels")
    print(json.dumps({"target_accuracy": evaluate(model, test, cfg.train.use_tam)}))
    return EXIT_OK


GRADCHECK_MODEL = ModelConfig(image_size=8, channels=1, patch_size=4, embed_dim=8, heads=2, depth=2, classes=3, mlp_ratio=2)


def gradcheck_report(samples: int = 240, seed: int = 0, train: TrainConfig | None = None):
    """Finite-difference check of the full objective on a small randomised model."""
    train = train or TrainConfig(alpha=0.3, beta=0.7, gamma=0.2)
    model = TVTModel(GRADCHECK_MODEL, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # move off the near-symmetric initialisation so every term has sizeable gradients
    for name, p in model.parameters().items():
        noise = 0.5 * rng.normal(size=p.shape)
        p.values = 1.0 + noise if name.endswith(".g") else noise
    side = GRADCHECK_MODEL.image_size
    batch = DomainBatch(
        rng.uniform(size=(3, side, side, 1)), np.array([0, 1, 2]), rng.uniform(size=(3, side, side, 1))
    )
    return objective_grad_check(model, batch, train, lam=0.6, samples=samples, seed=seed)


def cmd_gradcheck(args) -> int:
    if args.samples < 200:
        raise UsageError(f"--samples must be >= 200, got {args.samples}")
    rep = gradcheck_report(args.samples, args.seed)
    ok = rep.max_rel_error <= GRADCHECK_TOL
    print(
        json.dumps(
            {
                "max_rel_error": rep.max_rel_error,
                "worst_param": rep.name,
                "worst_index": list(map(int, rep.index)),
                "analytic": rep.analytic,
                "numeric": rep.numeric,
                "coordinates": rep.checked,
                "pass": ok,
            }
        )
    )
    return EXIT_OK if ok else EXIT_VERIFY


def attention_table(model: TVTModel, images: np.ndarray, batch_size: int = 256):
    """Per image: raw head-averaged class attention (self weight first), t, effective weights, class features."""
    raw, t, eff, feats = [], [], [], []
    for start in range(0, len(images), batch_size):
        f = model.features(images[start : start + batch_size], use_tam=True)
        raw.append(f.class_attention)
        t.append(f.transferability)
        eff.append(f.effective_attention)
        feats.append(f.class_state.values)
    return tuple(np.concatenate(x) for x in (raw, t, eff, feats))


def cmd_attn_dump(args) -> int:
    model = load_model(args.checkpoint)
    images = load_idx_images(_check_file(args.images))
    side = model.cfg.image_size
    if images.shape[1:3] != (side, side):
        raise UsageError(f"{args.images}: images are {images.shape[1]}x{images.shape[2]}, checkpoint expects {side}x{side}")
    if args.limit is not None:
        images = images[: args.limit]
    raw, t, eff, feats = attention_table(model, images)
    r = model.cfg.num_patches
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image"] + [f"raw_{i}" for i in range(r)] + [f"t_{i}" for i in range(r)] + [f"eff_{i}" for i in range(r)])
        for i in range(len(images)):
            w.writerow([i] + [repr(float(v)) for v in np.concatenate([raw[i, 1:], t[i], eff[i, 1:]])])
    feat_path = out.with_name(out.stem + "_features.csv")
    with open(feat_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "self_weight"] + [f"f_{j}" for j in range(feats.shape[1])])
        for i in range(len(images)):
            w.writerow([i, repr(float(raw[i, 0]))] + [repr(float(v)) for v in feats[i]])
    print(json.dumps({"rows": len(images), "attention": str(out), "features": str(feat_path)}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tvt", description="Transferable vision transformer for domain adaptation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def ablation_flags(p):
        p.add_argument("--no-tam", action="store_true", help="plain last layer; drops the patch adversarial term")
        p.add_argument("--no-dcm", action="store_true", help="drop the mutual-information term")
        p.add_argument("--source-only", action="store_true", help="classification loss only, no TAM")

    p = sub.add_parser("train", help="train and write metrics.jsonl, checkpoints and resolved_config.txt")
    p.add_argument("--config", help="key = value file; defaults apply for absent keys")
    p.add_argument("--out", required=True, help="output directory")
    ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="target test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    ablation_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training objective")
    p.add_argument("--config", help="accepted for symmetry; the check always uses its own reduced model")
    p.add_argument("--samples", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-dump", help="class-token attention and transferabilities per image as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--out", required=True, help="CSV path; features go to <stem>_features.csv")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_attn_dump)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "command", None) == "gradcheck" and args.config:
        try:
            load_config(args.config)
        except UsageError as exc:
            print(f"tvt: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, DataError) as exc:
        print(f"tvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"tvt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

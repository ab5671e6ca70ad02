"""Training loop, checkpointing, and the ablation sweep."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .losses import (AdamState, LossWeights, adam_step, cls_loss, lr_at,
                     seg_loss, syn_loss, total_loss)
from .metrics import dice as dice_metric
from .metrics import psnr as psnr_metric
from .model import ABLATIONS, ModelConfig, init_params, run_autoregressive
from .phantom import load_case, load_manifest
from .tcc import tcc_loss
from .tensorio import save_archive

ABLATION_ORDER = ("baseline", "no_dtam", "no_cte", "no_t_encoding", "full")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    base_lr: float = 1e-4
    warmup_epochs: int = 20
    seed: int = 42
    ablation: str = "full"
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        self.weights.validate()
        self.model.validate()

    def echo(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "warmup_epochs": self.warmup_epochs,
            "seed": self.seed,
            "ablation": self.ablation,
            "weights": {"dice": self.weights.dice, "ce": self.weights.ce,
                        "cls": self.weights.cls, "tcc": self.weights.tcc},
            "model": self.model.echo(),
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for key in ("epochs", "batch_size", "base_lr", "warmup_epochs", "seed", "ablation"):
            if key in d:
                setattr(cfg, key, type(getattr(cfg, key))(d[key]))
        if "weights" in d:
            cfg.weights = LossWeights(**d["weights"])
        if "model" in d:
            cfg.model = ModelConfig.from_echo({**cfg.model.echo(), **d["model"]})
        return cfg


def manifest_hash(data_dir):
    with open(os.path.join(data_dir, "manifest.json"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def case_losses(case, params, cfg, ablation, weights):
    """Forward pass plus all loss parts for one case."""
    bundle = run_autoregressive(case.ncmri, case.tumor_mask, case.times,
                                params, cfg, ablation=ablation)
    l_syn = syn_loss([po.image for po in bundle.phase_outputs], case.phases)
    l_seg = seg_loss([po.seg_logits for po in bundle.phase_outputs],
                     case.tumor_mask, weights)
    l_cls = cls_loss(bundle.class_probs, case.class_label)
    tcc_on = ABLATIONS[ablation][3]
    l_tcc = tcc_loss(bundle.per_phase_cls, bundle.signal_labels) if tcc_on else ad.Tensor(0.0)
    effective = weights if tcc_on else LossWeights(weights.dice, weights.ce, weights.cls, 0.0)
    l_total = total_loss(l_syn, l_seg, l_cls, l_tcc, effective)
    return bundle, {"syn": l_syn, "seg": l_seg, "cls": l_cls, "tcc": l_tcc, "total": l_total}


def _validation_pass(cases, params, cfg, ablation, weights):
    psnrs, dices, correct, losses = [], [], 0, []
    for case in cases:
        bundle, parts = case_losses(case, params, cfg, ablation, weights)
        losses.append(parts["total"].item())
        psnrs.append(np.mean([psnr_metric(po.image.data, gt)
                              for po, gt in zip(bundle.phase_outputs, case.phases)]))
        dices.append(dice_metric(bundle.aggregated_mask, case.tumor_mask.astype(np.uint8)))
        correct += int(np.argmax(bundle.class_probs.data) == case.class_label)
    return {
        "val_loss": float(np.mean(losses)),
        "val_psnr": float(np.mean(psnrs)),
        "val_dice": float(np.mean(dices)),
        "val_acc": correct / len(cases),
    }


def train(cfg, data_dir, out_dir, log_hook=None):
    """Run the full loop; writes the best-validation checkpoint and a JSONL log.

    Deterministic given cfg (including seed): identical configs produce
    bit-identical checkpoints and logs.
    """
    cfg.validate()
    manifest = load_manifest(data_dir)
    if manifest["config"]["image_size"] != cfg.model.image_size:
        raise ConfigError("model image_size does not match dataset")
    by_split = {"train": [], "val": [], "test": []}
    for entry in manifest["cases"]:
        by_split[entry["split"]].append(entry)
    train_cases = [load_case(data_dir, e) for e in by_split["train"]]
    val_cases = [load_case(data_dir, e) for e in by_split["val"]]
    if not train_cases or not val_cases:
        raise ConfigError("dataset must provide non-empty train and val splits")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.model, rng)
    state = AdamState(params)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    checkpoint_path = os.path.join(out_dir, "checkpoint.ntar")
    data_hash = manifest_hash(data_dir)

    best = {"val_loss": float("inf"), "epoch": -1, "arrays": None, "stats": None}
    records = []
    last_finite_epoch = -1
    with open(log_path, "w") as log_file:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs)
            order = rng.permutation(len(train_cases))
            sums = {"syn": 0.0, "seg": 0.0, "cls": 0.0, "tcc": 0.0, "total": 0.0}
            for start in range(0, len(order), cfg.batch_size):
                batch = sorted(order[start:start + cfg.batch_size])
                ad.zero_grads(params.values())
                for idx in batch:  # grads sum across the batch in case-index order
                    _, parts = case_losses(train_cases[idx], params, cfg.model,
                                           cfg.ablation, cfg.weights)
                    value = parts["total"].item()
                    if not np.isfinite(value):
                        raise NumericalError(
                            f"non-finite loss at epoch {epoch}, case {idx}; "
                            f"last fully finite epoch was {last_finite_epoch}")
                    ad.backward(parts["total"])
                    for key in sums:
                        sums[key] += parts[key].item()
                adam_step(params, state, lr)
            means = {k: v / len(train_cases) for k, v in sums.items()}
            last_finite_epoch = epoch

            stats = _validation_pass(val_cases, params, cfg.model, cfg.ablation, cfg.weights)
            record = {
                "epoch": epoch,
                "lr": lr,
                "l_syn": means["syn"],
                "l_seg": means["seg"],
                "l_cls": means["cls"],
                "l_tcc": means["tcc"],
                "l_total": means["total"],
                **stats,
            }
            records.append(record)
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            if log_hook is not None:
                log_hook(record)
            if stats["val_loss"] < best["val_loss"]:
                best = {"val_loss": stats["val_loss"], "epoch": epoch,
                        "arrays": {name: t.data.copy() for name, t in params.items()},
                        "stats": stats}

    meta = {
        "config": cfg.echo(),
        "epoch": best["epoch"],
        "val_stats": best["stats"],
        "data_manifest_hash": data_hash,
    }
    save_archive(checkpoint_path, best["arrays"], meta=meta)
    return {
        "checkpoint": checkpoint_path,
        "log": log_path,
        "best_epoch": best["epoch"],
        "best_val": best["stats"],
        "records": records,
    }


def run_ablation(base_cfg, data_dir, out_dir, evaluate_fn=None):
    """Train and evaluate every ablation variant with a shared seed and data.

    Returns the comparison rows in the fixed variant order.
    """
    from .metrics import evaluate as _evaluate
    evaluate_fn = evaluate_fn or _evaluate

    rows = []
    for variant in ABLATION_ORDER:
        cfg = TrainConfig.from_dict(base_cfg.echo())
        cfg.ablation = variant
        variant_dir = os.path.join(out_dir, variant)
        result = train(cfg, data_dir, variant_dir)
        report = evaluate_fn(result["checkpoint"], data_dir, split="test",
                             out_path=os.path.join(variant_dir, "report.json"))
        agg = report["aggregates"]
        rows.append({
            "variant": variant,
            "data_manifest_hash": manifest_hash(data_dir),
            "mse": float(np.mean([agg[p]["mse"] for p in ("art", "pv", "delay")])),
            "psnr": float(np.mean([agg[p]["psnr"] for p in ("art", "pv", "delay")])),
            "ssim": float(np.mean([agg[p]["ssim"] for p in ("art", "pv", "delay")])),
            "dice": agg["seg"]["dice"],
            "iou": agg["seg"]["iou"],
            "hd95": agg["seg"]["hd95"],
            "asd": agg["seg"]["asd"],
            "accuracy": agg["classification"]["accuracy"],
            "sensitivity": agg["classification"]["sensitivity"],
            "specificity": agg["classification"]["specificity"],
            "f1": agg["classification"]["f1"],
        })
    return rows


def format_ablation_table(rows):
    cols = ("variant", "mse", "psnr", "ssim", "dice", "iou", "hd95", "asd",
            "accuracy", "sensitivity", "specificity", "f1")
    lines = ["  ".join(f"{c:>12}" for c in cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:>12}" if isinstance(v, str) else
                         f"{'n/a':>12}" if v is None else f"{v:>12.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines)

"""Evaluation metrics and the split-level evaluation harness.

Geometric metrics use explicit boundary extraction and exact Euclidean
distances so they can be checked against brute-force references. SSIM
uses uniform 8x8 windows (stride 1) with population statistics; PSNR is
capped at 100 dB so aggregates over identical images stay finite.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .model import ModelConfig, run_autoregressive
from .phantom import PHASE_NAMES, load_case, load_manifest
from .tensorio import load_archive

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def mse(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10 log10(1 / MSE) for data range 1, capped at 100 dB."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def ssim(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = np.lib.stride_tricks.sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return float(score.mean())


def _check_binary(mask):
    arr = np.asarray(mask)
    if not np.all(np.isin(arr, (0, 1))):
        raise ContractError("mask must be binary")
    return arr.astype(bool)


def dice(p, q):
    p, q = _check_binary(p), _check_binary(q)
    if p.shape != q.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {q.shape}")
    denom = p.sum() + q.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, q).sum() / denom)


def iou(p, q):
    p, q = _check_binary(p), _check_binary(q)
    if p.shape != q.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {q.shape}")
    union = np.logical_or(p, q).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, q).sum() / union)


def boundary_pixels(mask):
    """Mask pixels with at least one background 4-neighbor (image border counts)."""
    m = _check_binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _surface_distances(p, q):
    bp = boundary_pixels(p)
    bq = boundary_pixels(q)
    if len(bp) == 0 or len(bq) == 0:
        return None
    d = np.sqrt(((bp[:, None, :] - bq[None, :, :]) ** 2).sum(axis=2))
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def hd95(p, q):
    """95th percentile (linear interpolation) of symmetric boundary distances."""
    dists = _surface_distances(p, q)
    if dists is None:
        return float("inf")
    return float(np.percentile(dists, 95.0))


def asd(p, q):
    """Mean of the pooled symmetric boundary distance set."""
    dists = _surface_distances(p, q)
    if dists is None:
        return float("inf")
    return float(dists.mean())


def classification_metrics(predictions, labels):
    """Accuracy, sensitivity, specificity, F1 with malignant (1) positive.

    Zero-denominator cases contribute 0 and are listed in the flags.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ContractError("prediction/label length mismatch")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    accuracy = ratio(tp + tn, tp + tn + fp + fn, "accuracy")
    sensitivity = ratio(tp, tp + fn, "sensitivity")
    specificity = ratio(tn, tn + fp, "specificity")
    precision = ratio(tp, tp + fp, "precision")
    if precision + sensitivity == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    return {
        "accuracy": accuracy,
        "sensitivity": sensitivity,
        "specificity": specificity,
        "f1": f1,
        "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        "flags": flags,
    }


# ---------------------------------------------------------------------------
# harness


def load_checkpoint(path):
    arrays, meta = load_archive(path)
    params = {name: ad.Tensor(arr) for name, arr in arrays.items()}
    cfg = ModelConfig.from_echo(meta["config"]["model"])
    return params, cfg, meta


def _finite_mean(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def evaluate(checkpoint_path, data_dir, split="test", out_path=None):
    """Run the model over one split and assemble a MetricsReport."""
    params, cfg, meta = load_checkpoint(checkpoint_path)
    manifest = load_manifest(data_dir)
    if manifest["config"]["image_size"] != cfg.image_size:
        raise ConfigError(
            f"checkpoint image size {cfg.image_size} does not match dataset "
            f"{manifest['config']['image_size']}")
    ablation = meta["config"].get("ablation", "full")
    entries = [e for e in manifest["cases"] if e["split"] == split]
    if not entries:
        raise ConfigError(f"split {split!r} has no cases")

    cases_out = []
    preds, labels = [], []
    for entry in entries:
        case = load_case(data_dir, entry)
        bundle = run_autoregressive(case.ncmri, case.tumor_mask, case.times,
                                    params, cfg, ablation=ablation)
        per_phase = {}
        for name, po, gt in zip(PHASE_NAMES, bundle.phase_outputs, case.phases):
            per_phase[name] = {
                "mse": mse(po.image.data, gt),
                "psnr": psnr(po.image.data, gt),
                "ssim": ssim(po.image.data, gt),
            }
        gt_mask = case.tumor_mask.astype(np.uint8)
        h = hd95(bundle.aggregated_mask, gt_mask)
        a = asd(bundle.aggregated_mask, gt_mask)
        empty = not np.isfinite(h)
        pred = int(np.argmax(bundle.class_probs.data))
        preds.append(pred)
        labels.append(case.class_label)
        cases_out.append({
            "id": entry["id"],
            "split": split,
            "label": case.class_label,
            "predicted": pred,
            "class_probs": bundle.class_probs.data.tolist(),
            "per_phase": per_phase,
            "seg": {
                "dice": dice(bundle.aggregated_mask, gt_mask),
                "iou": iou(bundle.aggregated_mask, gt_mask),
                "hd95": None if empty else h,
                "asd": None if empty else a,
                "empty_mask": empty,
            },
            "signals": [s.item() for s in bundle.signals],
            "signal_labels": bundle.signal_labels,
            "per_phase_cls": [p.item() for p in bundle.per_phase_cls],
        })

    aggregates = {"classification": classification_metrics(preds, labels)}
    for name in PHASE_NAMES:
        aggregates[name] = {
            k: _finite_mean(c["per_phase"][name][k] for c in cases_out)
            for k in ("mse", "psnr", "ssim")
        }
    aggregates["seg"] = {
        k: _finite_mean(c["seg"][k] for c in cases_out)
        for k in ("dice", "iou", "hd95", "asd")
    }
    aggregates["seg"]["empty_mask_count"] = sum(c["seg"]["empty_mask"] for c in cases_out)

    report = {
        "schema_version": 1,
        "split": split,
        "case_count": len(cases_out),
        "checkpoint_config": meta["config"],
        "cases": cases_out,
        "aggregates": aggregates,
    }
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
    return report

"""Command-line surface: generate, train, evaluate, synthesize, ablate.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint
incompatibility, 4 numerical failure. The PHASESYNTH_THREADS environment
variable caps internal worker parallelism (dataset generation).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .errors import ConfigError, ContractError, DomainError, GenerationError, NumericalError
from .metrics import evaluate
from .model import run_autoregressive
from .phantom import PHASE_NAMES, PhantomConfig, generate_dataset, load_case, load_manifest
from .tensorio import save_pgm
from .training import TrainConfig, format_ablation_table, run_ablation, train

USAGE_ERROR = 2
DATA_ERROR = 3
NUMERIC_ERROR = 4


def thread_cap():
    try:
        return max(1, int(os.environ.get("PHASESYNTH_THREADS", "1")))
    except ValueError:
        return 1


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _check_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path!r} is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)


def _write_run_manifest(out_dir, command, args, seed, started, outputs):
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": [os.path.abspath(p) for p in outputs],
    }
    for p in manifest["outputs"]:
        if not os.path.exists(p):
            raise ContractError(f"run manifest names missing output {p}")
    tmp = os.path.join(out_dir, "run_manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "run_manifest.json"))


def cmd_generate(args):
    started = _now()
    cfg = PhantomConfig.from_dict(_load_json(args.config)) if args.config else PhantomConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    _check_out_dir(args.out, args.force)
    manifest_path = generate_dataset(cfg, args.out, workers=thread_cap())
    _write_run_manifest(args.out, "generate", args, cfg.master_seed, started, [manifest_path])
    print(manifest_path)
    return 0


def cmd_train(args):
    started = _now()
    cfg = TrainConfig.from_dict(_load_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.ablation is not None:
        cfg.ablation = args.ablation
    _check_out_dir(args.out, args.force)
    result = train(cfg, args.data, args.out)
    _write_run_manifest(args.out, "train", args, cfg.seed, started,
                        [result["checkpoint"], result["log"]])
    print(result["checkpoint"])
    return 0


def cmd_evaluate(args):
    report = evaluate(args.checkpoint, args.data, split=args.split, out_path=args.out)
    agg = report["aggregates"]
    print(json.dumps({"split": args.split,
                      "psnr_delay": agg["delay"]["psnr"],
                      "dice": agg["seg"]["dice"],
                      "accuracy": agg["classification"]["accuracy"]}))
    return 0


def _dump_attention(record, out_dir, case_id):
    for entry in record:
        sizes = entry["block_sizes"]
        bounds = np.cumsum([0] + sizes)
        nb = len(sizes)
        mean_w = np.mean(entry["heads"], axis=0)
        block = np.zeros((nb, nb))
        for qi in range(nb):
            for ki in range(nb):
                block[qi, ki] = mean_w[bounds[qi]:bounds[qi + 1],
                                       bounds[ki]:bounds[ki + 1]].mean()
        path = os.path.join(out_dir, f"{case_id}_{entry['phase']}_attention.csv")
        labels = ["cond"] + [f"prior_{i}" for i in range(nb - 1)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([""] + labels)
            for qi in range(nb):
                writer.writerow([labels[qi]] + [f"{block[qi, ki]:.8f}" for ki in range(nb)])


def cmd_synthesize(args):
    started = _now()
    from .metrics import load_checkpoint
    params, cfg, meta = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if manifest["config"]["image_size"] != cfg.image_size:
        raise ConfigError("checkpoint and dataset image sizes differ")
    _check_out_dir(args.out, args.force)
    ablation = meta["config"].get("ablation", "full")
    outputs = []
    for entry in manifest["cases"]:
        if entry["split"] != args.split:
            continue
        case = load_case(args.data, entry)
        record = [] if args.dump_attention else None
        bundle = run_autoregressive(case.ncmri, case.tumor_mask, case.times,
                                    params, cfg, ablation=ablation, record=record)
        cid = entry["id"]
        for name, po in zip(PHASE_NAMES, bundle.phase_outputs):
            path = os.path.join(args.out, f"{cid}_phase_{name}.pgm")
            save_pgm(path, po.image.data)
            outputs.append(path)
        mask_path = os.path.join(args.out, f"{cid}_mask.pgm")
        save_pgm(mask_path, bundle.aggregated_mask.astype(np.float64))
        outputs.append(mask_path)
        cls_path = os.path.join(args.out, f"{cid}_class.json")
        with open(cls_path, "w") as f:
            json.dump({
                "class_probs": bundle.class_probs.data.tolist(),
                "predicted": int(np.argmax(bundle.class_probs.data)),
                "per_phase_cls": [p.item() for p in bundle.per_phase_cls],
                "signals": [s.item() for s in bundle.signals],
                "signal_labels": bundle.signal_labels,
            }, f, indent=1, sort_keys=True)
        outputs.append(cls_path)
        if record is not None:
            _dump_attention(record, args.out, cid)
    _write_run_manifest(args.out, "synthesize", args, meta["config"]["seed"], started, outputs)
    return 0


def cmd_ablate(args):
    started = _now()
    cfg = TrainConfig.from_dict(_load_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    _check_out_dir(args.out, args.force)
    rows = run_ablation(cfg, args.data, args.out)
    json_path = os.path.join(args.out, "ablation.json")
    with open(json_path, "w") as f:
        json.dump({"schema_version": 1, "config": cfg.echo(), "rows": rows},
                  f, indent=1, sort_keys=True)
    table = format_ablation_table(rows)
    table_path = os.path.join(args.out, "ablation_table.txt")
    with open(table_path, "w") as f:
        f.write(table + "\n")
    print(table)
    _write_run_manifest(args.out, "ablate", args, cfg.seed, started, [json_path, table_path])
    return 0


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def build_parser():
    parser = argparse.ArgumentParser(
        prog="phasesynth",
        description="Multi-phase contrast MRI synthesis, segmentation, and "
                    "classification on synthetic phantom data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a phantom dataset")
    p.add_argument("--config", help="PhantomConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=("full", "no_dtam", "no_cte", "no_t_encoding", "baseline"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synthesize", help="emit synthesized images for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("ablate", help="train and compare all ablation variants")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GenerationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ConfigError, ContractError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())

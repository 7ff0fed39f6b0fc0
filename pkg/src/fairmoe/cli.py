"""Command-line surface: synth-data, train, eval, ablate, route-report.

One JSON config document drives generation and training; its keys mirror
the SynthConfig / ModelConfig / TrainConfig field names under the
"synth", "model", and "train" sections.
"""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

from . import data as data_mod
from .data import SynthConfig
from .model import ModelConfig, load_checkpoint
from .moe import GroupStats
from .training import (
    TrainConfig,
    ablate_moe_layers,
    evaluate,
    router_depth_report,
    run_training,
    write_routing_csv,
)


def _read_config(path):
    with open(path) as f:
        return json.load(f)


def _load_dataset(data_dir):
    samples = data_mod.load(data_dir)
    stats = GroupStats.from_labels([s.group for s in samples], m=2)
    return samples, stats


def _split_from_config(samples, doc):
    frac = doc.get("train_fraction", 0.8)
    seed = doc.get("split_seed", 0)
    return data_mod.split(samples, frac, seed)


def cmd_synth_data(args):
    doc = _read_config(args.config)
    config = SynthConfig.from_dict(doc.get("synth", {}))
    samples, stats = data_mod.generate(config)
    data_mod.save(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out} (group sizes {stats.sizes.astype(int).tolist()})")


def cmd_train(args):
    doc = _read_config(args.config)
    model_cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **doc.get("model", {})})
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    samples, stats = _load_dataset(args.data)
    train_samples, _ = _split_from_config(samples, doc)
    model, log_rows = run_training(model_cfg, train_samples, stats, train_cfg, out_dir=args.out)
    last = log_rows[-1]
    print(f"trained {last['step']} steps; final train acc {last['train_acc']:.3f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.fmck'}")


def cmd_eval(args):
    model, stats, _, _, _ = load_checkpoint(args.checkpoint)
    samples, _ = _load_dataset(args.data)
    baseline_report = None
    baseline_name = None
    if args.baseline:
        base_model, base_stats, _, _, _ = load_checkpoint(args.baseline)
        _, baseline_report, _ = evaluate(base_model, samples, base_stats, mode=args.mode)
        baseline_name = str(args.baseline)
    log, report, records = evaluate(
        model, samples, stats, mode=args.mode,
        baseline_report=baseline_report, baseline_name=baseline_name,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    log.write_csv(out_dir / "predictions.csv")
    write_routing_csv(records, out_dir / "routing.csv") if records else None
    print(report.to_json())


def cmd_ablate(args):
    doc = _read_config(args.config)
    model_cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **doc.get("model", {})})
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    seeds = doc.get("ablation_seeds", [train_cfg.seed])
    samples, stats = _load_dataset(args.data)
    train_samples, test_samples = _split_from_config(samples, doc)
    table = ablate_moe_layers(model_cfg, train_samples, test_samples, stats, train_cfg, seeds=seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    for row in table:
        print(row)
    print(f"wrote {path}")


def cmd_route_report(args):
    model, stats, _, _, _ = load_checkpoint(args.checkpoint)
    samples, _ = _load_dataset(args.data)
    train_samples, test_samples = data_mod.split(samples, 0.8, 0)
    rows = router_depth_report(
        model, test_samples, train_samples, stats, score_kind=args.score_kind
    )
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(row)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fairmoe")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep the number of MoE layers")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("route-report", help="per-layer own-expert router scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-kind", choices=["softmax", "balanced"], default="softmax")
    p.set_defaults(fn=cmd_route_report)

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()

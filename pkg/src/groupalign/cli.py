"""Command-line interface: train runs, radius sweeps, dataset generation.

A run is specified either by a named preset or by a JSON/TOML config file,
with individual flags layered on top. Outputs land in --out-dir as
metrics.csv and summary.json (train), sweep.csv (sweep-tau), or a JSONL
dataset (gen-data).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .clustering import FixedCount, RadiusThreshold
from .core import DomainId
from .runner import (
    PRESETS,
    ExperimentConfig,
    make_preset,
    report,
    sweep_tau,
    train,
    write_sweep_csv,
)
from .simulate import generate
from .topology import TOPOLOGY_NAMES, TopologySpec


def _read_config_file(path: str) -> ExperimentConfig:
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:
            raise ValueError("TOML configs need Python 3.11+; use JSON instead") from exc
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    else:
        with open(path) as fh:
            payload = json.load(fh)
    return ExperimentConfig.from_dict(payload)


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = _read_config_file(args.config)
    elif args.preset is not None:
        cfg = make_preset(args.preset, seed=args.seed if args.seed is not None else 0)
    else:
        raise ValueError("provide --preset or --config")

    updates = {}
    for field in (
        "alignment",
        "mode",
        "metric",
        "lam1",
        "lam2",
        "margin",
        "grl_lam",
        "seed",
        "max_steps",
        "eval_every",
        "n_train_images",
        "n_eval_images",
    ):
        val = getattr(args, field)
        if val is not None:
            updates[field] = val
    if args.tau is not None and args.fixed_count is not None:
        raise ValueError("--tau and --fixed-count are mutually exclusive")
    if args.tau is not None:
        updates["stop"] = RadiusThreshold(args.tau)
    if args.fixed_count is not None:
        updates["stop"] = FixedCount(args.fixed_count)
    if args.image_level is not None:
        updates["image_level"] = args.image_level == "on"
    if args.topology is not None:
        n_sources = updates.get("topology", cfg.topology).n_sources
        updates["topology"] = TopologySpec.from_name(args.topology, n_sources)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(PRESETS), help="named scenario to start from")
    p.add_argument("--config", help="JSON or TOML file with an ExperimentConfig")
    p.add_argument("--alignment", choices=["adversarial", "contrastive"])
    p.add_argument("--mode", choices=["proposals", "sg", "mg", "mg_ca"])
    p.add_argument("--metric", choices=["cosine", "iou"])
    p.add_argument("--tau", type=float, help="radius threshold stop rule")
    p.add_argument("--fixed-count", type=int, help="fixed cluster count stop rule")
    p.add_argument("--image-level", choices=["on", "off"])
    p.add_argument("--lam1", type=float)
    p.add_argument("--lam2", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--grl-lam", type=float, dest="grl_lam")
    p.add_argument("--topology", choices=sorted(TOPOLOGY_NAMES))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--n-train-images", type=int, dest="n_train_images")
    p.add_argument("--n-eval-images", type=int, dest="n_eval_images")


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    trace = train(cfg)
    csv_path, summary_path = report(trace, args.out_dir)
    final = trace.final
    print(f"wrote {csv_path} and {summary_path}")
    print(f"final step {final.step}: target_accuracy={final.target_accuracy:.4f}")
    return 0


def _cmd_sweep_tau(args) -> int:
    cfg = _resolve_config(args)
    taus = [float(t) for t in args.taus.split(",") if t.strip()]
    rows = sweep_tau(cfg, taus)
    os.makedirs(args.out_dir, exist_ok=True)
    path = write_sweep_csv(rows, os.path.join(args.out_dir, "sweep.csv"))
    print(f"wrote {path}")
    for r in rows:
        print(f"tau={r.tau:g}: target_accuracy={r.target_accuracy:.4f} mean_groups={r.mean_group_count:.2f}")
    return 0


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    domain = DomainId.parse(args.domain)
    if domain.kind == "target":
        spec = cfg.target_spec
    else:
        if domain.index >= len(cfg.source_specs):
            raise ValueError(f"config has {len(cfg.source_specs)} sources, no {args.domain}")
        spec = cfg.source_specs[domain.index]
    seed = args.data_seed if args.data_seed is not None else cfg.seed
    dataset = generate(spec, args.n_images, seed, domain)
    dataset.save_jsonl(args.out)
    print(f"wrote {dataset.n_proposals} proposals across {len(dataset)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupalign",
        description="Similarity-grouped domain alignment experiments on synthetic features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    _add_config_flags(p_train)
    p_train.add_argument("--out-dir", default="run_out")
    p_train.set_defaults(func=_cmd_train)

    p_sweep = sub.add_parser("sweep-tau", help="re-train across radius values")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--taus", required=True, help="comma-separated radius values")
    p_sweep.add_argument("--out-dir", default="run_out")
    p_sweep.set_defaults(func=_cmd_sweep_tau)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset as JSONL")
    _add_config_flags(p_gen)
    p_gen.add_argument("--domain", default="target", help='"target" or "source:<k>"')
    p_gen.add_argument("--n-images", type=int, default=100, dest="n_images")
    p_gen.add_argument("--data-seed", type=int, dest="data_seed", help="dataset seed (defaults to config seed)")
    p_gen.add_argument("--out", default="dataset.jsonl")
    p_gen.set_defaults(func=_cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

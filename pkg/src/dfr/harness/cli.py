"""Command-line entry point: ``dfr <subcommand> [flags]``.

Every subcommand reads an optional INI config (``--config``) and applies the
per-flag overrides on top.  Results are printed as a human-readable line
followed by a ``key=value`` block.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .audit import BRANCHES, branch_features, dump_embeddings, linear_probe
from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import build_data, test_pool
from .evaluate import evaluate
from .train import model_from_checkpoint, train

SUBCOMMANDS = ("train", "eval", "gen-data", "dump-embeddings", "probe", "fsdg-eval")

# flag name -> TrainConfig field
_OVERRIDES = {
    "way": "way",
    "shot": "shot",
    "queries": "queries",
    "seed": "seed",
    "iterations": "iterations",
    "lr": "lr",
    "setting": "setting",
    "target_domain": "target_domain",
    "multi_domain_query": "multi_domain_query",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "grl_lambda": "grl_lambda",
    "checkpoint": "checkpoint",
    "out_dir": "out_dir",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with key = value lines")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--grl-lambda", type=float)
    p.add_argument("--checkpoint", help="checkpoint path to write (train) or read (others)")
    p.add_argument("--out-dir")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--eval-seed", type=int, help="task-sampling seed (default: --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfr", description="Disentangled feature representation for few-shot learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training; writes a checkpoint and a metrics CSV")
    _common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--setting", choices=("A", "B"))
    p.add_argument("--target-domain")

    p = sub.add_parser("eval", help="few-shot accuracy with a 95%% interval")
    _common(p)
    _eval_flags(p)

    p = sub.add_parser("fsdg-eval", help="few-shot domain-generalization accuracy (Setting A or B)")
    _common(p)
    _eval_flags(p)
    p.add_argument("--setting", choices=("A", "B"), required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--multi-domain-query", action="store_true", default=None)

    p = sub.add_parser("gen-data", help="render the synthetic dataset and write its manifest")
    _common(p)

    p = sub.add_parser("dump-embeddings", help="per-sample features plus a 2-D projection")
    _common(p)
    p.add_argument("--branch", choices=BRANCHES, default="cls")
    p.add_argument("--samples", type=int, default=0, help="cap on dumped samples (0 = whole split)")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")

    p = sub.add_parser("probe", help="linear probes of each branch for class and nuisance")
    _common(p)
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--held-out", type=float, default=0.3)
    return parser


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else (TrainConfig.load(args.config) if args.config else TrainConfig())
    changes = {}
    for flag, field_name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[field_name] = value
    return cfg.replace(**changes) if changes else cfg


def _report(text: str, values: dict) -> None:
    print(text)
    for k, v in values.items():
        print(f"{k}={v}")


def _load_for_eval(args):
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    # evaluation-side flags (episode shape, FS-DG plan) override the stored training config
    base = ckpt.config if not args.config else TrainConfig.load(args.config)
    cfg = resolve_config(args, base)
    return ckpt, cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ckpt_path = cfg.checkpoint or os.path.join(cfg.out_dir, "model.dfrc")
    metrics_path = cfg.metrics or os.path.join(cfg.out_dir, "metrics.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.ini"))
    result = train(cfg, checkpoint_path=ckpt_path, metrics_path=metrics_path)
    last = result.metrics[-1] if result.metrics else [0] * 7
    _report(f"trained {cfg.iterations} iterations in {result.seconds:.1f}s",
            {"checkpoint": ckpt_path, "metrics": metrics_path, "iterations": cfg.iterations,
             "final_l_total": f"{last[5]:.6g}", "final_query_acc": f"{last[6]:.4f}"})
    return 0


def _run_eval(args, fsdg: bool) -> int:
    ckpt, cfg = _load_for_eval(args)
    model = model_from_checkpoint(ckpt)
    ds, plan = build_data(cfg)
    pool = test_pool(ds, plan, args.split)
    seed = args.eval_seed if args.eval_seed is not None else cfg.seed
    rep = evaluate(model, pool, cfg.way, cfg.shot, cfg.queries, args.tasks, seed,
                   plan=plan if fsdg else None, multi_domain_query=cfg.multi_domain_query)
    values = {"acc": f"{rep.mean:.4f}", "ci95": f"{rep.ci95:.4f}", "tasks": rep.tasks, "way": rep.way,
              "shot": rep.shot, "queries": rep.queries, "seed": seed}
    if fsdg:
        values.update(setting=plan.setting, target_domain=ds.domain_names[plan.target_domain],
                      source_domains=",".join(ds.domain_names[d] for d in plan.source_domains),
                      multi_domain_query=str(cfg.multi_domain_query).lower())
    _report(rep.summary(), values)
    return 0


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    ds, plan = build_data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = os.path.join(cfg.out_dir, "manifest.csv")
    digest = ds.write_manifest(manifest)
    _report(f"wrote {len(ds)} samples to {manifest}",
            {"manifest": manifest, "manifest_sha256": digest, "images_sha256": ds.checksum(),
             "samples": len(ds), "classes": len(ds.class_names), "domains": ",".join(ds.domain_names),
             "train_classes": len(plan.train), "val_classes": len(plan.val), "test_classes": len(plan.test)})
    return 0


def _split_indices(ds, plan, split: str, cap: int = 0) -> np.ndarray:
    pool = test_pool(ds, plan, split)
    idx = np.concatenate([pool.by_class[int(c)] for c in pool.classes])
    if cap and cap < len(idx):
        idx = np.sort(np.random.default_rng(0).choice(idx, size=cap, replace=False))
    return idx


def cmd_dump(args) -> int:
    ckpt, cfg = _load_for_eval(args)
    model = model_from_checkpoint(ckpt)
    ds, plan = build_data(cfg)
    idx = _split_indices(ds, plan, args.split, args.samples)
    os.makedirs(cfg.out_dir, exist_ok=True)
    feat_path = os.path.join(cfg.out_dir, f"embeddings_{args.branch}.csv")
    proj_path = os.path.join(cfg.out_dir, f"projection_{args.branch}.csv")
    feats = dump_embeddings(model, ds, idx, args.branch, feat_path, proj_path)
    _report(f"dumped {len(idx)} x {feats.shape[1]} {args.branch} features",
            {"embeddings": feat_path, "projection": proj_path, "samples": len(idx), "width": feats.shape[1]})
    return 0


def cmd_probe(args) -> int:
    ckpt, cfg = _load_for_eval(args)
    model = model_from_checkpoint(ckpt)
    ds, plan = build_data(cfg)
    idx = _split_indices(ds, plan, args.split)
    targets = {"class": ds.class_ids[idx]}
    if "hue_bin" in ds.nuisance:
        targets["hue"] = ds.nuisance["hue_bin"][idx]
    if len(ds.domain_names) > 1:
        targets["domain"] = ds.domain_ids[idx]
    values = {}
    for branch in BRANCHES:
        feats = branch_features(model, ds.images[idx], branch)
        for name, labels in targets.items():
            values[f"{branch}_{name}"] = f"{100 * linear_probe(feats, labels, args.held_out, cfg.seed).accuracy:.2f}"
    _report("linear probe accuracy (%) per branch and target", values)
    return 0


_HANDLERS = {
    "train": cmd_train,
    "eval": lambda a: _run_eval(a, fsdg=False),
    "fsdg-eval": lambda a: _run_eval(a, fsdg=True),
    "gen-data": cmd_gen_data,
    "dump-embeddings": cmd_dump,
    "probe": cmd_probe,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage text on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, OSError, KeyError, FloatingPointError) as exc:
        print(f"dfr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

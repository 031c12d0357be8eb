"""Command-line entry point: ``maple <command> ...``.

Exit codes: 0 ok, 1 usage, 2 validation (bad hierarchy, config or data),
3 runtime (training divergence, provider or I/O failures).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .data import Dataset, SplitSpec, split, synth_dataset
from .encoder import VIT_B16_ENCODER, EncoderConfig
from .hierarchy import HierarchyError, LabelHierarchy, level_partition, load_fixture, load_hierarchy
from .metrics import PUBLISHED_PARAMS_M, PredictionDump, confusion_delta, count_by_component, param_account
from .model import MapleModel, ModelConfig
from .semantic_init import EmbeddingError, EmbeddingProvider, node_prompts
from .train import (EMBEDDING_STAGES, TrainConfig, TrainingDiverged, evaluate, fewshot_experiment,
                    node_embeddings, train, write_embeddings_csv)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("maple")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _hierarchy(ref: str) -> LabelHierarchy:
    """A YAML path, or the name of a bundled fixture (aid, dfc15, mured, corine_ship)."""
    if Path(ref).exists():
        return load_hierarchy(ref)
    try:
        return load_fixture(ref)
    except FileNotFoundError:
        raise UsageError(f"no hierarchy file or fixture named {ref!r}") from None


def _seed(args, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("MAPLE_SEED")
    return int(env) if env else default


def _provider(args, kind: str, dim: int, seed: int) -> EmbeddingProvider:
    endpoint = args.embed_endpoint or os.environ.get("MAPLE_EMBED_URL")
    if endpoint and kind == "deterministic_fallback" and args.embed_endpoint:
        kind = "remote"
    return EmbeddingProvider(kind, dim=dim, endpoint=endpoint, cache_dir=args.embed_cache, seed=seed)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return doc


def _train_config(args) -> tuple[TrainConfig, dict]:
    doc = _load_config(args.config)
    extra = {k: doc.pop(k) for k in ("data", "hierarchy", "val_fraction") if k in doc}
    for flag, key in (("mode", "model_mode"), ("init", "init_mode"), ("epochs", "total_epochs"), ("lr", "lr")):
        if getattr(args, flag, None) is not None:
            doc[key] = getattr(args, flag)
    if getattr(args, "no_clip", False):
        doc["grad_clip"] = None
    doc["seed"] = _seed(args, doc.get("seed", 0))
    return TrainConfig.from_dict(doc), extra


# ---------------------------------------------------------------- commands

def cmd_hierarchy(args) -> int:
    h = load_hierarchy(args.file)
    if args.action == "validate":
        levels, leaves = level_partition(h)
        print(json.dumps({"valid": True, "nodes": len(h), "levels": [len(l) for l in levels],
                          "leaves": len(leaves), "digest": h.digest()}))
    else:
        for n, prompt in zip(h.nodes, node_prompts(h)):
            print(f"{n.name}\t{prompt}")
    return EXIT_OK


def cmd_data_synth(args) -> int:
    h = _hierarchy(args.hierarchy)
    ds = synth_dataset(h, args.n, seed=_seed(args), noise=args.noise, image_size=args.image_size)
    ds.save(args.out, image_format=args.format)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, extra = _train_config(args)
    data_dir = args.data or extra.get("data")
    if data_dir is None:
        raise UsageError("train needs --data DIR (or a 'data' key in the config)")
    ds = Dataset.load(data_dir)
    val_fraction = float(extra.get("val_fraction", args.val_fraction))
    if val_fraction > 0:
        tr, val, _ = split(ds, SplitSpec((1.0 - val_fraction, val_fraction, 0.0), seed=cfg.seed))
    else:
        tr, val = ds, None
    provider = _provider(args, cfg.provider, cfg.embed_dim, cfg.seed)
    res = train(ds.hierarchy, tr, cfg, val_ds=val, out_dir=args.out, provider=provider)
    print(json.dumps({"checkpoint": str(res.checkpoint), "best_epoch": res.best_epoch,
                      "epochs_run": len(res.log)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = MapleModel.load(args.checkpoint)
    ds = Dataset.load(args.data, hierarchy=model.hierarchy if args.data_hierarchy_from_checkpoint else None)
    if ds.hierarchy.digest() != model.hierarchy.digest():
        raise ValueError("dataset hierarchy does not match the checkpoint hierarchy")
    report, dump = evaluate(model, ds, seed=model.config.seed)
    report.write_json(args.report)
    if args.dump:
        dump.write_jsonl(args.dump)
    if args.curves:
        report.write_curves_csv(args.curves)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_fewshot(args) -> int:
    cfg, extra = _train_config(args)
    if args.data or extra.get("data"):
        ds = Dataset.load(args.data or extra["data"])
    else:
        h = _hierarchy(args.hierarchy or extra.get("hierarchy", "aid"))
        ds = synth_dataset(h, args.n, seed=cfg.seed, noise=args.noise, image_size=cfg.encoder.image_size,
                           channels=cfg.encoder.channels)
    ks = [int(k) for k in args.k.split(",")]
    modes = args.modes.split(",")
    provider = _provider(args, cfg.provider, cfg.embed_dim, cfg.seed)
    res = fewshot_experiment(ds, cfg, ks, args.repeats, modes, split_seed=cfg.seed, out_dir=args.out,
                             provider=provider)
    text = res.to_csv()
    if args.csv:
        Path(args.csv).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_analyze_confusion(args) -> int:
    a, b = PredictionDump.read_jsonl(args.a), PredictionDump.read_jsonl(args.b)
    truth = Dataset.load(args.truth)
    delta = confusion_delta(a, b, truth.labels, truth.hierarchy, args.threshold, ids=truth.ids)
    out = {"summary": delta.summary(), "cells": delta.cells()}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    print(json.dumps(out["summary"]))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = MapleModel.load(args.checkpoint)
    ds = Dataset.load(args.data, hierarchy=model.hierarchy) if args.data else None
    emb = node_embeddings(model, args.stage, ds)
    write_embeddings_csv(args.out, model, emb)
    print(f"wrote {emb.shape[0]}x{emb.shape[1]} {args.stage} embeddings to {args.out}")
    return EXIT_OK


def full_scale_config(doc: dict) -> tuple[LabelHierarchy, ModelConfig]:
    """Encoder, hierarchy and GNN depth for parameter accounting; defaults to the ViT-B/16 shape on AID."""
    doc = dict(doc)
    h = _hierarchy(doc.pop("hierarchy", "aid"))
    enc = dict(VIT_B16_ENCODER)
    enc.update(doc.pop("encoder", {}))
    cfg = ModelConfig(encoder=EncoderConfig(**enc), gnn_layers=doc.pop("gnn_layers", 2),
                      embed_dim=doc.pop("embed_dim", 768), init_mode=doc.pop("init_mode", "semantic"),
                      seed=doc.pop("seed", 0))
    if doc:
        raise ValueError(f"unknown keys for report params: {sorted(doc)}")
    return h, cfg


def cmd_report_params(args) -> int:
    h, cfg = full_scale_config(_load_config(args.config))
    maple = MapleModel(h, cfg)
    flat = MapleModel(h, ModelConfig(**{**cfg.to_dict(), "mode": "flat"}))
    acct = param_account(maple, flat)
    with tempfile.TemporaryDirectory() as tmp:
        out_dir = Path(args.out) if args.out else Path(tmp)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, model in (("maple", maple), ("flat", flat)):
            path = model.save(out_dir / f"{name}.bin")
            walked = ckpt.walk_tensors(path)
            by_comp = count_by_component({n: shape for n, shape, _ in walked})
            walk_total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _ in walked)
            acct[name]["walk_total"] = walk_total
            acct[name]["walk_matches"] = by_comp == acct[name]["components"] and walk_total == acct[name]["total"]
    acct["config"] = {"hierarchy_nodes": len(h), **cfg.to_dict()}
    lines = [f"{'component':<10} {'maple':>12} {'flat':>12}"]
    for comp in acct["maple"]["components"]:
        lines.append(f"{comp:<10} {acct['maple']['components'][comp]:>12,} {acct['flat']['components'][comp]:>12,}")
    lines.append(f"{'trainable':<10} {acct['maple']['trainable']:>12,} {acct['flat']['trainable']:>12,}")
    lines.append(f"overhead {acct['overhead_pct']:+.2f}% (published reference {PUBLISHED_PARAMS_M['overhead_pct']:+.1f}%, "
                 f"{PUBLISHED_PARAMS_M['flat']}M -> {PUBLISHED_PARAMS_M['maple']}M)")
    if args.json:
        Path(args.json).write_text(json.dumps(acct, indent=2))
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--embed-endpoint", help="base URL of a remote text-embedding service")
    common.add_argument("--embed-cache", help="directory for cached prompt embeddings")
    common.add_argument("--seed", type=int, help="overrides MAPLE_SEED and the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="maple", description="Hierarchical multi-label classification toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    hp = sub.add_parser("hierarchy", parents=[common], help="validate a hierarchy or print node prompts")
    hp.add_argument("action", choices=["validate", "prompts"])
    hp.add_argument("file")
    hp.set_defaults(func=cmd_hierarchy)

    dp = sub.add_parser("data", help="dataset tools")
    dsub = dp.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    sp = dsub.add_parser("synth", parents=[common], help="render a synthetic hierarchy-consistent dataset")
    sp.add_argument("--hierarchy", required=True, help="YAML path or fixture name")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--format", choices=["f32", "ppm"], default="f32")
    sp.set_defaults(func=cmd_data_synth)

    def train_flags(q):
        q.add_argument("--config", help="YAML training config")
        q.add_argument("--mode", choices=["maple", "flat"])
        q.add_argument("--init", choices=["semantic", "random"])
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
        q.add_argument("--data", help="dataset directory")

    tp = sub.add_parser("train", parents=[common], help="train MAPLE or the flat baseline")
    train_flags(tp)
    tp.add_argument("--out", required=True)
    tp.add_argument("--val-fraction", type=float, default=0.1)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", parents=[common], help="per-level AU-PRC report for a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--report", required=True)
    ep.add_argument("--dump", help="write per-image predictions (JSONL)")
    ep.add_argument("--curves", help="write precision-recall points (CSV)")
    ep.add_argument("--data-hierarchy-from-checkpoint", action="store_true", help=argparse.SUPPRESS)
    ep.set_defaults(func=cmd_eval)

    fp = sub.add_parser("fewshot", parents=[common], help="K-shot comparison of flat and MAPLE")
    train_flags(fp)
    fp.add_argument("--k", default="4,8,12,16")
    fp.add_argument("--repeats", type=int, default=3)
    fp.add_argument("--modes", default="flat,maple")
    fp.add_argument("--hierarchy", help="hierarchy for a synthetic dataset when --data is absent")
    fp.add_argument("--n", type=int, default=600)
    fp.add_argument("--noise", type=float, default=0.1)
    fp.add_argument("--out", help="directory for per-run logs, reports and dumps")
    fp.add_argument("--csv", help="write the summary table here as well")
    fp.set_defaults(func=cmd_fewshot)

    ap = sub.add_parser("analyze", help="analysis tools")
    asub = ap.add_subparsers(dest="analyze_command", required=True, parser_class=_Parser)
    cp = asub.add_parser("confusion", parents=[common], help="leaf confusion counts of b relative to a")
    cp.add_argument("--a", required=True, help="baseline prediction dump")
    cp.add_argument("--b", required=True, help="comparison prediction dump")
    cp.add_argument("--truth", required=True, help="dataset directory with the true labels")
    cp.add_argument("--threshold", type=float, default=0.5)
    cp.add_argument("--out")
    cp.set_defaults(func=cmd_analyze_confusion)

    xp = sub.add_parser("export", help="export tools")
    xsub = xp.add_subparsers(dest="export_command", required=True, parser_class=_Parser)
    ee = xsub.add_parser("embeddings", parents=[common], help="node embeddings at one model stage")
    ee.add_argument("--checkpoint", required=True)
    ee.add_argument("--stage", choices=EMBEDDING_STAGES, required=True)
    ee.add_argument("--data", help="images to average over (gnn and fused stages)")
    ee.add_argument("--out", required=True)
    ee.set_defaults(func=cmd_export_embeddings)

    rp = sub.add_parser("report", help="reports")
    rsub = rp.add_subparsers(dest="report_command", required=True, parser_class=_Parser)
    pp = rsub.add_parser("params", parents=[common], help="per-component parameter counts")
    pp.add_argument("--config", help="YAML with encoder / hierarchy / gnn_layers overrides")
    pp.add_argument("--out", help="keep the walked checkpoints here")
    pp.add_argument("--json", help="write the full accounting as JSON")
    pp.set_defaults(func=cmd_report_params)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"runtime error: {exc} (last good checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_RUNTIME
    except (HierarchyError, ckpt.CheckpointError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EmbeddingError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``slint <command> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from . import config as cfgmod
from .data import KnowledgeGraph, degree_stats, load_fixture, load_kg, perturb
from .evaluation import (
    ablation,
    evaluate,
    low_degree_report,
    robustness_sweep,
    sweep,
    write_rows,
)
from .kge import EmbeddingTable, train_transe
from .synthetic import make_synthetic_kg
from .trainer import SLiNTModel, TrainConfig, train, write_metrics

log = logging.getLogger("slint")

DATA_HELP = "dataset directory with train/valid/test.txt, or 'fixture', or 'synthetic:<seed>'"


def load_data(spec: str) -> KnowledgeGraph:
    if spec == "fixture":
        return load_fixture()
    if spec.startswith("synthetic"):
        _, _, seed = spec.partition(":")
        return make_synthetic_kg(int(seed or 0))
    path = Path(spec)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory not found: {spec}")
    return load_kg(path)


def dataset_hashes(kg: KnowledgeGraph) -> dict[str, str]:
    """sha256 of each split as verbalized text; independent of file layout."""
    out = {}
    for split in ("train", "valid", "test"):
        h = hashlib.sha256()
        for t in kg.split(split):
            h.update((kg.verbalize(t) + "\n").encode("utf-8"))
        out[split] = h.hexdigest()
    return out


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, command: str, argv: list[str], cfg: TrainConfig, data: str,
                   kg: KnowledgeGraph) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict(),
        "data": data,
        "seed": cfg.seed,
        "dataset_hashes": dataset_hashes(kg),
        "code_version": code_version(),
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------- commands


def cmd_stats(args, cfg, kg, out):
    s = degree_stats(kg)
    row = {
        "entities": len(kg.entities),
        "relations": len(kg.relations),
        "train": len(kg.train),
        "valid": len(kg.valid),
        "test": len(kg.test),
        **asdict(s),
    }
    for k, v in row.items():
        print(f"{k}\t{round(v, 2) if isinstance(v, float) else v}")
    _dump(out / "stats.json", row)


def cmd_train_kge(args, cfg, kg, out):
    work = perturb(kg, cfg.train_fraction, cfg.edge_dropout, cfg.seed)
    table = train_transe(work, cfg.transe_config())
    table.save(out / "embeddings.txt")
    split = args.split
    m = evaluate(table, work, split, workers=cfg.workers)
    write_metrics([{"split": split, **m.as_dict()}], out / "metrics.jsonl")
    print(f"{split} mrr={m.mrr:.4f} hits@1={m.hits1:.4f} hits@10={m.hits10:.4f}")


def _table(args, cfg, kg) -> EmbeddingTable:
    if getattr(args, "embeddings", None):
        return EmbeddingTable.load(args.embeddings)
    return train_transe(kg, cfg.transe_config())


def cmd_train(args, cfg, kg, out):
    work = perturb(kg, cfg.train_fraction, cfg.edge_dropout, cfg.seed)
    table = _table(args, cfg, work)
    table.save(out / "embeddings.txt")
    model, history = train(work, table, cfg, metrics_path=out / "metrics.jsonl")
    model.save(out / "checkpoint.pt")
    best = max(r["val_mrr"] for r in history) if history else float("nan")
    print(f"epochs={len(history)} best_val_mrr={best:.4f} checkpoint={out / 'checkpoint.pt'}")


def cmd_eval(args, cfg, kg, out):
    if args.checkpoint:
        target = SLiNTModel.load(args.checkpoint, kg)
        mode = "slint" if target.cfg.uses_lm else "embedding-only"
    elif args.embeddings:
        target, mode = EmbeddingTable.load(args.embeddings), "embedding-only"
    else:
        raise ValueError("eval needs --checkpoint or --embeddings")
    rows = [evaluate(target, kg, args.split, mode=mode, workers=cfg.workers).as_dict()]
    try:
        rows.append(low_degree_report(target, kg, args.split, mode=mode, workers=cfg.workers).as_dict())
    except ValueError as exc:
        log.warning("low-degree slice skipped: %s", exc)
    write_metrics(rows, out / "metrics.jsonl")
    for r in rows:
        print(f"{r['slice']}\tmrr={r['mrr']:.4f} hits@1={r['hits1']:.4f} hits@3={r['hits3']:.4f} "
              f"hits@10={r['hits10']:.4f} n={r['n_queries']}")


def _report(rows, out, key, split):
    write_rows(rows, out / "results.jsonl", out / "results.csv")
    for r in rows:
        print(f"{r[key]}\tmrr={r[f'{split}_mrr']:.4f} baseline_mrr={r['baseline_mrr']:.4f}")


def cmd_ablate(args, cfg, kg, out):
    rows = ablation(kg, cfg, args.split, out_dir=out)
    _report(rows, out, "config", args.split)


def cmd_sweep(args, cfg, kg, out):
    values = [float(v) if args.param == "lambda" else int(v) for v in args.values.split(",") if v]
    rows = sweep(kg, cfg, args.param, values, args.split)
    _report(rows, out, args.param, args.split)


def cmd_robustness(args, cfg, kg, out):
    rows = robustness_sweep(kg, cfg, args.split)
    _report(rows, out, "condition", args.split)


COMMANDS = {
    "stats": (cmd_stats, "dataset counts and degree statistics"),
    "train-kge": (cmd_train_kge, "train the structural (TransE) encoder"),
    "train": (cmd_train, "train SGNE weights and LM adapters"),
    "eval": (cmd_eval, "filtered MRR / Hits@k of a checkpoint or embedding table"),
    "ablate": (cmd_ablate, "full model and the three single-module ablations"),
    "sweep": (cmd_sweep, "vary k_s or lambda"),
    "robustness": (cmd_robustness, "reduced training data and edge dropout"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--data", help=DATA_HELP)
    g.add_argument("--config", help="flat key: value config file (YAML or JSON)")
    g.add_argument("--out", help="output directory for manifest, metrics and artifacts")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, help="threads for candidate scoring")
    g.add_argument("--split", default="test", choices=("train", "valid", "test"), help="split to score (default: test)")
    g.add_argument("-v", "--verbose", action="store_true", help="log per-epoch records")
    h = common.add_argument_group("model")
    h.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    h.add_argument("--lr", type=float)
    h.add_argument("--epochs", type=int)
    h.add_argument("--batch-size", type=int)
    h.add_argument("--k-s", type=int, help="pseudo-neighbours per vector")
    h.add_argument("--k-c", type=int, help="hard positives/negatives per query")
    h.add_argument("--n-c", type=int, help="contrastive pool sample size")
    h.add_argument("--m", type=int, help="candidates re-ranked per query")
    h.add_argument("--k-r", type=int, help="candidates receiving injected vectors")
    h.add_argument("--train-fraction", type=float)
    h.add_argument("--edge-dropout", type=float)
    for name in ("sgne", "dhcl", "gddi"):
        h.add_argument(f"--no-{name}", dest=name, action="store_const", const=False, help=f"disable {name.upper()}")

    parser = argparse.ArgumentParser(
        prog="slint",
        description="Knowledge graph completion: structural candidates re-ranked by a small adapter-tuned LM.",
        epilog=f"Any config key may also be set through the environment as {cfgmod.ENV_PREFIX}<KEY> "
               f"(e.g. {cfgmod.ENV_PREFIX}K_S=3). Precedence: flags > environment > --config file > defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("train", "eval"):
            p.add_argument("--embeddings", help="load a saved embedding table instead of training one")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint written by 'slint train'")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=("k_s", "lambda"))
            p.add_argument("--values", required=True, help="comma-separated values")
    return parser


CLI_KEYS = ("seed", "workers", "lam", "lr", "epochs", "batch_size", "k_s", "k_c", "n_c", "m", "k_r",
            "train_fraction", "edge_dropout", "sgne", "dhcl", "gddi", "data", "out")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, run = cfgmod.resolve({k: getattr(args, k) for k in CLI_KEYS}, args.config)
        if "data" not in run:
            parser.error("--data is required (or set it in the config file / environment)")
        out = Path(run.get("out") or f"runs/{args.command}")
        kg = load_data(run["data"])
        write_manifest(out, args.command, argv, cfg, run["data"], kg)
        COMMANDS[args.command][0](args, cfg, kg, out)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"slint {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

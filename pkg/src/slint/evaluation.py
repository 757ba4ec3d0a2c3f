"""Filtered ranking metrics and experiment harnesses (ablation, robustness, sweeps)."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .data import KnowledgeGraph, Query, filter_set, low_degree_slice, perturb
from .kge import EmbeddingTable, entity_scores, train_transe

if TYPE_CHECKING:
    from .trainer import SLiNTModel, TrainConfig

MODES = ("embedding-only", "slint")


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int
    slice: str = "all"

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_from_ranks(ranks: Sequence[int], label: str = "all") -> Metrics:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no queries to score")
    return Metrics(
        mrr=float(np.mean(1.0 / r)),
        hits1=float(np.mean(r <= 1)),
        hits3=float(np.mean(r <= 3)),
        hits10=float(np.mean(r <= 10)),
        n_queries=int(r.size),
        slice=label,
    )


def embedding_rank(q: Query, table: EmbeddingTable, kg: KnowledgeGraph, filtered: bool = True) -> int:
    """Pessimistic filtered rank of the gold under structural scores.

    Competitors scoring equal to the gold are counted as ranked ahead of it.
    """
    scores = entity_scores(q, table)
    ahead = scores >= scores[q.gold]
    ahead[q.gold] = False
    if filtered:
        excl = list(filter_set(kg, q))
        ahead[excl] = False
    return 1 + int(np.count_nonzero(ahead))


def slint_rank(model: "SLiNTModel", q: Query) -> int:
    """Gold rank when the top-m candidates are re-ranked by the LM.

    Entities outside the candidate list follow it in structural order.
    """
    ordered, cands = model.rerank(q)
    if q.gold in ordered:
        return ordered.index(q.gold) + 1
    scores = entity_scores(q, model.table)
    ahead = scores >= scores[q.gold]
    ahead[q.gold] = False
    ahead[list(filter_set(model.kg, q))] = False
    ahead[list(cands.ids)] = False
    return len(cands.ids) + 1 + int(np.count_nonzero(ahead))


def _ranks(fn, queries: Sequence[Query], workers: int) -> list[int]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, queries))
    return [fn(q) for q in queries]


def evaluate(
    model_or_table,
    kg: KnowledgeGraph,
    split: str = "test",
    mode: str = "embedding-only",
    queries: Sequence[Query] | None = None,
    label: str = "all",
    workers: int = 1,
) -> Metrics:
    """Filtered MRR and Hits@{1,3,10} over both query directions of ``split``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if queries is None:
        queries = kg.queries(split)
    if not queries:
        raise ValueError(f"split {split!r} has no queries")
    if isinstance(model_or_table, EmbeddingTable):
        if mode == "slint":
            raise ValueError("slint mode needs a trained model, not a bare table")
        table, model = model_or_table, None
    else:
        model = model_or_table
        table = model.table
    if mode == "embedding-only" or not model.cfg.uses_lm:
        ranks = _ranks(lambda q: embedding_rank(q, table, kg), queries, workers)
    else:
        ranks = _ranks(lambda q: slint_rank(model, q), queries, workers)
    return metrics_from_ranks(ranks, label)


def low_degree_report(model_or_table, kg: KnowledgeGraph, split: str = "test", mode: str = "embedding-only", workers: int = 1) -> Metrics:
    queries = low_degree_slice(kg, split)
    if not queries:
        raise ValueError("low-degree slice is empty")
    return evaluate(model_or_table, kg, split, mode, queries=queries, label="low-degree", workers=workers)


# ---------------------------------------------------------------------- harnesses


def run_experiment(kg: KnowledgeGraph, cfg: "TrainConfig", split: str = "test", metrics_path=None,
                   table: EmbeddingTable | None = None) -> dict:
    """Perturb (per cfg), fit TransE, train SLiNT and score ``split``; returns one result row."""
    from .trainer import train

    work = perturb(kg, cfg.train_fraction, cfg.edge_dropout, cfg.seed)
    if table is None or cfg.train_fraction < 1.0 or cfg.edge_dropout > 0.0:
        table = train_transe(work, cfg.transe_config())
    model, log = train(work, table, cfg, metrics_path=metrics_path)
    mode = "slint" if cfg.uses_lm else "embedding-only"
    result = evaluate(model, work, split, mode=mode, workers=cfg.workers)
    baseline = evaluate(table, work, split, mode="embedding-only", workers=cfg.workers)
    row = {f"{split}_{k}": v for k, v in result.as_dict().items() if k != "slice"}
    row.update({f"baseline_{k}": v for k, v in baseline.as_dict().items() if k not in ("slice", "n_queries")})
    row["epochs_run"] = len(log)
    row["best_val_mrr"] = max((r["val_mrr"] for r in log), default=None)
    row["_model"] = model
    return row


ABLATIONS = {
    "full": {},
    "-SGNE": {"sgne": False},
    "-DHCL": {"dhcl": False},
    "-GDDI": {"gddi": False},
}


def _public(row: dict) -> dict:
    return {k: v for k, v in row.items() if not k.startswith("_")}


def ablation(kg: KnowledgeGraph, cfg: "TrainConfig", split: str = "test", out_dir: str | Path | None = None) -> list[dict]:
    rows = []
    for name, change in ABLATIONS.items():
        c = replace(cfg, **change)
        mpath = Path(out_dir) / f"metrics_{name.strip('-').lower()}.jsonl" if out_dir else None
        row = _public(run_experiment(kg, c, split, metrics_path=mpath))
        rows.append({"config": name, **row})
    return rows


ROBUSTNESS = {
    "baseline": {"train_fraction": 1.0, "edge_dropout": 0.0},
    "train_80pct": {"train_fraction": 0.8, "edge_dropout": 0.0},
    "edge_dropout_10pct": {"train_fraction": 1.0, "edge_dropout": 0.1},
}


def robustness_sweep(kg: KnowledgeGraph, cfg: "TrainConfig", split: str = "test") -> list[dict]:
    rows = []
    for name, change in ROBUSTNESS.items():
        row = _public(run_experiment(kg, replace(cfg, **change), split))
        rows.append({"condition": name, **change, **row})
    return rows


SWEEPABLE = {"k_s": "k_s", "lambda": "lam"}


def sweep(kg: KnowledgeGraph, cfg: "TrainConfig", param: str, values: Iterable, split: str = "test") -> list[dict]:
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if param not in SWEEPABLE:
        raise ValueError(f"param must be one of {sorted(SWEEPABLE)}")
    rows = []
    for v in values:
        row = _public(run_experiment(kg, replace(cfg, **{SWEEPABLE[param]: v}), split))
        rows.append({param: v, **row})
    return rows


def write_rows(rows: list[dict], jsonl_path: str | Path | None = None, csv_path: str | Path | None = None) -> None:
    if jsonl_path:
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    if csv_path and rows:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)

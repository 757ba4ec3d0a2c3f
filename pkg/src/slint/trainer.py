"""Joint objective, training loop, ablation toggles and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .data import Direction, KnowledgeGraph, Query, filter_set
from .dhcl import DHCLConfig, build_contrastive_batch, contrastive_loss
from .gddi import (
    PAD,
    LMConfig,
    TinyLM,
    UNK,
    TokenizedPrompt,
    WordVocab,
    alignment_kl,
    build_prompt,
    corpus_texts,
    inject,
    lm_loss,
    pad_batch,
    score_candidates,
    teacher_forcing_labels,
    tokenize,
)
from .kge import CandidateList, EmbeddingTable, TransEConfig, query_embedding, rank_candidates
from .numerics import DTYPE
from .sgne import SGNE, NeighborCache, entity_neighbors, neighbor_triples, query_neighbors

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every knob of a run. Keys map one-to-one onto config-file keys and CLI flags."""

    lam: float = 0.5
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 3
    patience: int = 2
    k_s: int = 5
    k_c: int = 10
    n_c: int = 50
    m: int = 20
    k_r: int = 1
    sgne: bool = True
    dhcl: bool = True
    gddi: bool = True
    seed: int = 0
    train_fraction: float = 1.0
    edge_dropout: float = 0.0
    # SGNE internals
    sgne_hidden: int = 64
    sgne_heads: int = 4
    # tiny LM and adapters
    lm_width: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    lm_context: int = 256
    vocab_cap: int = 8192
    structural_token_init: bool = True
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    pretrain_epochs: int = 7
    pretrain_lr: float = 3e-3
    # structural encoder
    transe_dim: int = 32
    transe_epochs: int = 100
    transe_lr: float = 0.01
    transe_margin: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.k_r > self.m:
            raise ValueError("k_r cannot exceed m")

    @property
    def uses_lm(self) -> bool:
        return self.sgne or self.dhcl or self.gddi

    def transe_config(self) -> TransEConfig:
        return TransEConfig(
            dim=self.transe_dim, margin=self.transe_margin, lr=self.transe_lr,
            epochs=self.transe_epochs, seed=self.seed,
        )

    def lm_config(self) -> LMConfig:
        return LMConfig(
            width=self.lm_width, layers=self.lm_layers, heads=self.lm_heads, context=self.lm_context,
            lora_rank=self.lora_rank, lora_alpha=self.lora_alpha, lora_dropout=self.lora_dropout,
            seed=self.seed,
        )

    def dhcl_config(self) -> DHCLConfig:
        return DHCLConfig(sample_size=self.n_c, hard_count=self.k_c, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {("lam" if k in ("lambda", "lambda_") else k.replace("-", "_")): v for k, v in d.items()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(lm_loss_value, cl_loss_value, lam: float):
    """L_LM + lambda * L_CL."""
    if not (math.isfinite(float(torch.as_tensor(lm_loss_value).detach()))
            and math.isfinite(float(torch.as_tensor(cl_loss_value).detach()))):
        raise FloatingPointError("total_loss needs finite inputs")
    return lm_loss_value + lam * cl_loss_value


@dataclass
class Example:
    query: Query
    cands: CandidateList
    tp: TokenizedPrompt
    q_neighbors: list[int]
    ent_neighbors: list[list[int]]


class SLiNTModel:
    """Everything needed to re-rank candidates: table, SGNE weights, LM with adapters."""

    def __init__(self, kg: KnowledgeGraph, table: EmbeddingTable, cfg: TrainConfig, vocab: WordVocab | None = None):
        self.kg = kg
        self.table = table
        self.cfg = cfg
        self.cache = NeighborCache()
        self.sgne = SGNE(table.dim, cfg.lm_width, cfg.sgne_hidden, cfg.sgne_heads, seed=cfg.seed)
        self.vocab = vocab or WordVocab.build(corpus_texts(kg), cap=cfg.vocab_cap)
        self.lm = TinyLM(self.vocab, cfg.lm_config())
        self._examples: dict[tuple, Example] = {}
        self._ent_t = torch.from_numpy(table.entity_vecs)
        if vocab is None and cfg.structural_token_init:
            self.lm.seed_token_embeddings(self._structural_rows())

    def _structural_rows(self) -> dict[int, torch.Tensor]:
        """Single-token entity names start at a fixed orthonormal lift of their structural vector."""
        g = torch.Generator().manual_seed(self.cfg.seed + 29)
        lift = torch.linalg.qr(torch.randn(self.cfg.lm_width, self.table.dim, generator=g, dtype=DTYPE))[0]
        rows = {}
        for e, name in enumerate(self.kg.entities.names):
            ids = self.vocab.encode(name)
            if len(ids) == 1 and ids[0] != self.vocab.stoi[UNK]:
                rows[ids[0]] = lift @ self._ent_t[e]
        return rows

    # ------------------------------------------------------------------ inputs

    def example(self, q: Query, train_only: bool = False) -> Example:
        key = (q, train_only)
        ex = self._examples.get(key)
        if ex is None:
            cfg = self.cfg
            excl = filter_set(self.kg, q, train_only=train_only)
            cands = rank_candidates(q, self.table, cfg.m, excl)
            q_nb = query_neighbors(q, self.table, cfg.k_s, self.cache)
            prompt = build_prompt(q, self.kg, cands, neighbor_triples(self.kg, q_nb, q.triple), min(cfg.k_r, len(cands.ids)))
            tp = tokenize(prompt, self.vocab)
            ent_nb = [entity_neighbors(e, self.table, cfg.k_s, self.cache) for e in cands.ids[: cfg.k_r]]
            ex = Example(q, cands, tp, q_nb, ent_nb)
            self._examples[key] = ex
        return ex

    def enhance_batch(self, examples: list[Example]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """q-tilde rows (B x d') and per-example candidate vectors (k_r x d')."""
        xq = torch.from_numpy(np.stack([query_embedding(ex.query, self.table) for ex in examples]))
        ent_ids = [e for ex in examples for e in ex.cands.ids[: self.cfg.k_r]]
        xe = self._ent_t[ent_ids] if ent_ids else torch.zeros(0, self.table.dim, dtype=DTYPE)
        if self.cfg.sgne:
            q_enh = self._fuse(xq, [ex.q_neighbors for ex in examples])
            if ent_ids:
                e_enh = self._fuse(xe, [nb for ex in examples for nb in ex.ent_neighbors])
            else:
                e_enh = xe.new_zeros(0, self.cfg.lm_width)
        else:
            q_enh = self.sgne.project(xq)
            e_enh = self.sgne.project(xe) if ent_ids else xe.new_zeros(0, self.cfg.lm_width)
        per_ex, pos = [], 0
        for ex in examples:
            k = len(ex.tp.entity_pos)
            per_ex.append(e_enh[pos:pos + k])
            pos += len(ex.cands.ids[: self.cfg.k_r])
        return q_enh, per_ex

    def _fuse(self, x: torch.Tensor, neighbor_ids: list[list[int]]) -> torch.Tensor:
        if len({len(nb) for nb in neighbor_ids}) == 1:
            return self.sgne(x, self._ent_t[torch.tensor(neighbor_ids, dtype=torch.long)])
        # ragged neighbour lists (tiny pools): fall back to one row at a time
        return torch.stack([self.sgne(x[i], self._ent_t[nb]) for i, nb in enumerate(neighbor_ids)])

    def lm_inputs(self, ex: Example, q_vec, e_vecs, extra_ids=()) -> torch.Tensor:
        if self.cfg.gddi:
            return inject(ex.tp, self.lm, q_vec, list(e_vecs), extra_ids=extra_ids)
        return inject(ex.tp, self.lm, None, extra_ids=extra_ids)

    # ------------------------------------------------------------------ scoring

    def rerank(self, q: Query) -> tuple[list[int], CandidateList]:
        """Candidate ids ordered by LM likelihood, ties broken by the structural order."""
        ex = self.example(q)
        if not self.cfg.uses_lm:
            return list(ex.cands.ids), ex.cands
        self.lm.eval()
        with torch.no_grad():
            q_enh, e_enh = self.enhance_batch([ex])
            q_vec, e_vec = (q_enh[0], e_enh[0]) if self.cfg.gddi else (None, ())
            names = [self.kg.entities.name(e) for e in ex.cands.ids]
            scores = score_candidates(self.lm, ex.tp, q_vec, e_vec, names)
        order = sorted(range(len(names)), key=lambda i: (-scores[i], i))
        return [ex.cands.ids[i] for i in order], ex.cands

    # ------------------------------------------------------------------ state

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        if not self.cfg.uses_lm:
            return []
        return list(self.sgne.parameters()) + self.lm.adapter_parameters()

    def state(self) -> dict:
        return {
            "sgne": {k: v.clone() for k, v in self.sgne.state_dict().items()},
            "adapters": {n: p.detach().clone() for n, p in self.lm.named_parameters() if "lora_" in n},
        }

    def load_state(self, state: dict) -> None:
        self.sgne.load_state_dict(state["sgne"])
        params = dict(self.lm.named_parameters())
        with torch.no_grad():
            for n, t in state["adapters"].items():
                params[n].copy_(t)

    def save(self, path: str | Path) -> None:
        blob = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "base_hash": self.lm.base_hash(),
            "lm": self.lm.state_dict(),
            "has_adapters": self.lm.has_adapters,
            "vocab": self.vocab.itos,
            "table": {"entity": self.table.entity_vecs, "relation": self.table.relation_vecs},
            **self.state(),
        }
        torch.save(blob, path)

    @classmethod
    def load(cls, path: str | Path, kg: KnowledgeGraph) -> "SLiNTModel":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
        cfg = TrainConfig.from_dict(blob["config"])
        table = EmbeddingTable(blob["table"]["entity"], blob["table"]["relation"])
        vocab = WordVocab(blob["vocab"][6:])
        model = cls(kg, table, cfg, vocab)
        if blob["has_adapters"]:
            model.lm.add_adapters()
        model.lm.load_state_dict(blob["lm"])
        model.load_state({"sgne": blob["sgne"], "adapters": blob["adapters"]})
        if model.lm.base_hash() != blob["base_hash"]:
            raise ValueError("checkpoint base-weight hash mismatch")
        return model


# ---------------------------------------------------------------------- base LM


def pretrain_lm(model: SLiNTModel, epochs: int, lr: float, batch_size: int = 32) -> list[float]:
    """Causal-LM training of the base model on train facts verbalized as prompts.

    Each train triple yields a tail and a head prompt (no injection; markers are
    ordinary tokens) followed by its answer; only answer tokens carry loss.
    """
    lm, vocab = model.lm, model.vocab
    examples = [model.example(q, train_only=True) for q in model.kg.queries("train")]
    seqs = [torch.tensor(ex.tp.token_ids + ex.tp.target_ids) for ex in examples]
    labels = [teacher_forcing_labels(len(ex.tp.token_ids), ex.tp.target_ids) for ex in examples]
    opt = torch.optim.Adam(lm.parameters(), lr=lr)
    g = torch.Generator().manual_seed(model.cfg.seed + 101)
    pad_vec = lm.embed([vocab.stoi[PAD]])[0].detach()
    history = []
    for _ in range(epochs):
        lm.train()
        perm = torch.randperm(len(seqs), generator=g).tolist()
        total = 0.0
        for start in range(0, len(seqs), batch_size):
            chunk = perm[start:start + batch_size]
            x, y = pad_batch([lm.embed(seqs[i]) for i in chunk], [labels[i] for i in chunk], pad_vec)
            loss = lm_loss(lm, x, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        history.append(total / max(len(seqs), 1))
    lm.eval()
    return history


# ---------------------------------------------------------------------- training


def training_queries(kg: KnowledgeGraph, rng: np.random.Generator) -> list[Query]:
    """Tail and head queries alternating, triples visited in a shuffled order."""
    out = []
    for i in rng.permutation(len(kg.train)):
        out.append(Query.from_triple(kg.train[i], Direction.TAIL))
        out.append(Query.from_triple(kg.train[i], Direction.HEAD))
    return out


@dataclass
class StepResult:
    loss_lm: float
    loss_cl: float
    loss_total: float
    cl_grad_sq: float


def batch_losses(model: SLiNTModel, examples: list[Example], rng_for, pool_fn):
    """(L_LM, L_CL) for a batch; either is a zero tensor when its module is off."""
    cfg = model.cfg
    q_enh, e_enh = model.enhance_batch(examples)

    loss_cl = q_enh.new_zeros(())
    if cfg.dhcl:
        xq = torch.from_numpy(np.stack([query_embedding(ex.query, model.table) for ex in examples]))
        q_raw = model.sgne.project(xq)
        pool = pool_fn()
        dcfg = cfg.dhcl_config()
        terms = []
        for i, ex in enumerate(examples):
            batch = build_contrastive_batch(q_enh[i], q_raw[i], pool, dcfg, rng_for(ex))
            terms.append(contrastive_loss(q_enh[i], batch))
        loss_cl = torch.stack(terms).mean()

    loss_lm = q_enh.new_zeros(())
    if cfg.uses_lm:
        seqs, labels = [], []
        for i, ex in enumerate(examples):
            seqs.append(model.lm_inputs(ex, q_enh[i], e_enh[i], extra_ids=ex.tp.target_ids))
            labels.append(teacher_forcing_labels(len(ex.tp.token_ids), ex.tp.target_ids))
        pad_vec = model.lm.embed([model.vocab.stoi[PAD]])[0]
        x, y = pad_batch(seqs, labels, pad_vec)
        loss_lm = lm_loss(model.lm, x, y)
    return loss_lm, loss_cl


def train_step(model: SLiNTModel, examples: list[Example], opt, rng_for, pool_fn) -> StepResult:
    """One optimizer step on a batch of prepared examples."""
    cfg = model.cfg
    params = model.trainable_parameters()
    loss_lm, loss_cl = batch_losses(model, examples, rng_for, pool_fn)

    cl_term = cfg.lam * loss_cl
    if not (torch.isfinite(loss_lm) and torch.isfinite(cl_term)):
        raise FloatingPointError(
            f"non-finite loss on batch starting with {examples[0].query}: lm={loss_lm.item()} cl={loss_cl.item()}"
        )
    total = total_loss(loss_lm, cl_term, 1.0)
    opt.zero_grad()
    cl_grad_sq = 0.0
    if cfg.dhcl and params:
        # gradient of the weighted contrastive term alone, recorded before accumulation
        grads = torch.autograd.grad(cl_term, params, retain_graph=True, allow_unused=True)
        cl_grad_sq = float(sum((g * g).sum() for g in grads if g is not None))
    if total.requires_grad:
        total.backward()
        opt.step()
    return StepResult(loss_lm.item(), loss_cl.item(), total.item(), cl_grad_sq)


def mean_alignment_kl(model: SLiNTModel, queries: Iterable[Query]) -> float:
    """Average KL between plain and injected next-token distributions over prompts."""
    if not model.cfg.uses_lm:
        return 0.0
    vals = []
    model.lm.eval()
    with torch.no_grad():
        for q in queries:
            ex = model.example(q)
            plain = inject(ex.tp, model.lm, None)
            if model.cfg.gddi:
                q_enh, e_enh = model.enhance_batch([ex])
                injected = inject(ex.tp, model.lm, q_enh[0], list(e_enh[0]))
            else:
                injected = plain
            vals.append(alignment_kl(model.lm, plain, injected).item())
    return float(np.mean(vals)) if vals else 0.0


def train(kg: KnowledgeGraph, table: EmbeddingTable, cfg: TrainConfig, metrics_path: str | Path | None = None,
          kl_probe: int = 16) -> tuple[SLiNTModel, list[dict]]:
    """Train SGNE weights and LM adapters; returns the best-on-validation model and the epoch log.

    With every toggle off nothing is trained and re-ranking falls back to the
    structural order, i.e. the run reproduces the embedding-only baseline.
    """
    from .evaluation import evaluate

    torch.manual_seed(cfg.seed)
    model = SLiNTModel(kg, table, cfg)
    log: list[dict] = []
    if cfg.uses_lm:
        pretrain_lm(model, cfg.pretrain_epochs, cfg.pretrain_lr)
        model.lm.add_adapters()
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr) if params else None
    split = "valid" if kg.valid else "train"
    probe = kg.queries(split)[:kl_probe]

    best_mrr, best_state, stale = -1.0, model.state(), 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        queries = training_queries(kg, rng)
        sums = np.zeros(4)
        n_batches = 0
        if params:
            model.lm.train()
            index = {}

            def rng_for(ex, _epoch=epoch):
                return np.random.default_rng([cfg.seed, _epoch, index[id(ex)]])

            def pool_fn():
                return model.sgne.project(model._ent_t)

            for start in range(0, len(queries), cfg.batch_size):
                chunk = queries[start:start + cfg.batch_size]
                examples = [model.example(q, train_only=True) for q in chunk]
                for j, ex in enumerate(examples):
                    index[id(ex)] = start + j
                r = train_step(model, examples, opt, rng_for, pool_fn)
                sums += [r.loss_lm, r.loss_cl, r.loss_total, r.cl_grad_sq]
                n_batches += 1
            model.lm.eval()
        means = sums / max(n_batches, 1)
        val = evaluate(model, kg, split, mode="slint")
        record = {
            "epoch": epoch,
            "loss_lm": float(means[0]),
            "loss_cl": float(means[1]),
            "loss_total": float(means[2]),
            "cl_grad_norm": float(math.sqrt(sums[3])),
            "alignment_kl": mean_alignment_kl(model, probe),
            "val_mrr": val.mrr,
            "val_hits1": val.hits1,
            "val_hits10": val.hits10,
        }
        log.append(record)
        logger.info("epoch %d %s", epoch, json.dumps(record))
        if metrics_path is not None:
            write_metrics(log, metrics_path)
        if val.mrr > best_mrr:
            best_mrr, best_state, stale = val.mrr, model.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    return model, log


def write_metrics(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

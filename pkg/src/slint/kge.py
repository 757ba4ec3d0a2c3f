"""TransE structural embeddings and top-m candidate generation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Direction, KnowledgeGraph, Query

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    entity_vecs: np.ndarray
    relation_vecs: np.ndarray
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.entity_vecs = np.ascontiguousarray(self.entity_vecs, dtype=np.float64)
        self.relation_vecs = np.ascontiguousarray(self.relation_vecs, dtype=np.float64)
        if self.entity_vecs.ndim != 2 or self.relation_vecs.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.entity_vecs.shape[1] != self.relation_vecs.shape[1]:
            raise ValueError("entity and relation dimensions differ")
        if not (np.isfinite(self.entity_vecs).all() and np.isfinite(self.relation_vecs).all()):
            raise ValueError("embedding table contains NaN or Inf")
        self.norms = np.linalg.norm(self.entity_vecs, axis=1)
        self._hash = None

    @property
    def dim(self) -> int:
        return self.entity_vecs.shape[1]

    @property
    def n_entities(self) -> int:
        return self.entity_vecs.shape[0]

    def content_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            h.update(self.entity_vecs.tobytes())
            h.update(self.relation_vecs.tobytes())
            self._hash = h.hexdigest()
        return self._hash

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for mat in (self.entity_vecs, self.relation_vecs):
                fh.write(f"{mat.shape[0]} {mat.shape[1]}\n")
                for row in mat:
                    fh.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        """Read the plain-text format written by :meth:`save` (entity block, then relation block)."""
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        blocks = []
        pos = 0
        for _ in range(2):
            n, d = map(int, lines[pos].split())
            rows = [np.array(lines[pos + 1 + i].split(), dtype=np.float64) for i in range(n)]
            blocks.append(np.stack(rows) if rows else np.zeros((0, d)))
            pos += n + 1
        return cls(blocks[0], blocks[1])


@dataclass
class TransEConfig:
    dim: int = 32
    margin: float = 1.0
    lr: float = 0.01
    epochs: int = 100
    negatives_per_positive: int = 1
    seed: int = 0
    batch_size: int = 128

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


@dataclass
class CandidateList:
    query: Query
    ids: list[int]
    scores: list[float]


def init_transe(n_entities: int, n_relations: int, cfg: TransEConfig) -> tuple[torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    ent = (torch.rand(n_entities, cfg.dim, generator=g, dtype=torch.float64) * 2 - 1) * bound
    rel = (torch.rand(n_relations, cfg.dim, generator=g, dtype=torch.float64) * 2 - 1) * bound
    rel = rel / rel.norm(dim=1, keepdim=True)
    ent = ent / ent.norm(dim=1, keepdim=True)
    return ent, rel


def train_transe(kg: KnowledgeGraph, cfg: TransEConfig) -> EmbeddingTable:
    """Margin-ranking TransE with uniform head/tail corruption.

    Entity vectors are projected back onto the unit sphere after every epoch.
    """
    if not kg.train:
        raise ValueError("TransE needs a non-empty train split")
    ent, rel = init_transe(kg.n_entities, kg.n_relations, cfg)
    ent.requires_grad_(True)
    rel.requires_grad_(True)
    opt = torch.optim.Adam([ent, rel], lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    triples = torch.tensor(kg.train, dtype=torch.long)
    n = len(triples)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = triples[perm[start:start + cfg.batch_size]]
            pos = batch.repeat(cfg.negatives_per_positive, 1)
            neg = pos.clone()
            corrupt_head = torch.rand(len(neg), generator=g) < 0.5
            rand_ent = torch.randint(kg.n_entities, (len(neg),), generator=g)
            neg[corrupt_head, 0] = rand_ent[corrupt_head]
            neg[~corrupt_head, 2] = rand_ent[~corrupt_head]
            d_pos = (ent[pos[:, 0]] + rel[pos[:, 1]] - ent[pos[:, 2]]).norm(dim=1)
            d_neg = (ent[neg[:, 0]] + rel[neg[:, 1]] - ent[neg[:, 2]]).norm(dim=1)
            loss = torch.relu(cfg.margin + d_pos - d_neg).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite TransE loss at epoch {epoch}, batch offset {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        with torch.no_grad():
            ent /= ent.norm(dim=1, keepdim=True)
        logger.debug("transe epoch %d loss %.6f", epoch, total / n)
    return EmbeddingTable(ent.detach().numpy().copy(), rel.detach().numpy().copy())


def query_embedding(q: Query, table: EmbeddingTable) -> np.ndarray:
    """Translate the known entity toward the missing slot: h + r for tails, t - r for heads."""
    e = table.entity_vecs[q.known]
    r = table.relation_vecs[q.rel]
    return e + r if q.direction is Direction.TAIL else e - r


def entity_scores(q: Query, table: EmbeddingTable) -> np.ndarray:
    """Negative L2 distance from the query embedding to every entity."""
    return -np.linalg.norm(table.entity_vecs - query_embedding(q, table), axis=1)


def rank_candidates(q: Query, table: EmbeddingTable, m: int, excl: set[int] | frozenset = frozenset()) -> CandidateList:
    """Top-m entities by score, ``excl`` removed, ties broken by ascending id."""
    if m < 1:
        raise ValueError("m must be >= 1")
    scores = entity_scores(q, table)
    ids = np.arange(len(scores))
    if excl:
        keep = np.ones(len(scores), dtype=bool)
        keep[list(excl)] = False
        ids = ids[keep]
    order = ids[np.lexsort((ids, -scores[ids]))][:m]
    return CandidateList(q, order.tolist(), scores[order].tolist())

"""Structure-guided neighborhood enhancement.

Each input vector (a query embedding or a candidate entity embedding) is fused
with its top-k_s cosine nearest neighbours from the entity pool: both are
lifted by ``silu(x @ W_in)``, attended over as an unordered set, and the
first output row is mapped to the language-model width by ``W_out``.
"""

from __future__ import annotations

import pickle
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import KnowledgeGraph, Query, Triple
from .kge import EmbeddingTable, query_embedding
from .numerics import DTYPE, AttentionParams, cosine_to_rows, multi_head_attention, silu, topk


def retrieve_pseudo_neighbors(
    x: np.ndarray, table: EmbeddingTable, k_s: int, self_id: int | None = None
) -> list[int]:
    """Exact top-k_s cosine neighbours of ``x`` in the entity pool."""
    if k_s < 1:
        raise ValueError("k_s must be >= 1")
    if table.n_entities == 0:
        raise ValueError("empty entity pool")
    sims = cosine_to_rows(np.asarray(x, dtype=np.float64), table.entity_vecs, table.norms)
    if self_id is not None:
        ids = np.delete(np.arange(len(sims)), self_id)
        if ids.size == 0:
            return []
        return ids[topk(sims[ids], k_s, "highest")].tolist()
    return topk(sims, k_s, "highest")


@dataclass
class EnhancedVector:
    vec: torch.Tensor
    source: str
    source_id: object


class SGNE(nn.Module):
    """Learnable fusion weights: ``w_in`` (d x h), attention (h), ``w_out`` (h x d')."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, heads: int = 4, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        self.w_in = nn.Parameter(torch.randn(in_dim, hidden, generator=g, dtype=DTYPE) / np.sqrt(in_dim))
        self.attention = AttentionParams(hidden, heads, generator=g)
        self.w_out = nn.Parameter(torch.randn(hidden, out_dim, generator=g, dtype=DTYPE) / np.sqrt(hidden))

    def _check(self, t: torch.Tensor, what: str) -> None:
        if t.shape[-1] != self.in_dim:
            raise ValueError(f"{what} has width {t.shape[-1]}, expected {self.in_dim}")

    def forward(self, x: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        """Enhance ``x`` (..., d) with ``neighbors`` (..., k_s, d); returns (..., d')."""
        x = torch.as_tensor(x, dtype=DTYPE)
        neighbors = torch.as_tensor(neighbors, dtype=DTYPE)
        self._check(x, "input")
        if neighbors.numel():
            self._check(neighbors, "neighbours")
        else:
            neighbors = neighbors.reshape(*x.shape[:-1], 0, self.in_dim)
        seq = silu(torch.cat([x.unsqueeze(-2), neighbors], dim=-2) @ self.w_in)
        z = multi_head_attention(seq, self.attention)
        return z[..., 0, :] @ self.w_out

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Neighbour-free path ``silu(x @ W_in) @ W_out`` (no attention)."""
        x = torch.as_tensor(x, dtype=DTYPE)
        self._check(x, "input")
        return silu(x @ self.w_in) @ self.w_out


def enhance(x, neighbor_vecs, w: SGNE, source: str = "query", source_id=None) -> EnhancedVector:
    return EnhancedVector(w(x, neighbor_vecs), source, source_id)


class NeighborCache:
    """Memoised neighbour lists keyed by (kind, id, k_s) for one embedding table.

    The cache remembers the content hash of the table it was filled from; a
    lookup against a different table clears it first.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._version: str | None = None
        self._store: dict[tuple, list[int]] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def neighbors(self, kind: str, key, x: np.ndarray, table: EmbeddingTable, k_s: int, self_id: int | None = None) -> list[int]:
        version = table.content_hash()
        full_key = (kind, key, k_s)
        if self._version == version:
            hit = self._store.get(full_key)
            if hit is not None:
                self.hits += 1
                return hit
        ids = retrieve_pseudo_neighbors(x, table, k_s, self_id)
        with self._lock:
            if self._version != version:
                self._store.clear()
                self._version = version
            self._store[full_key] = ids
            self.misses += 1
        return ids

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            pickle.dump({"version": self._version, "store": self._store}, fh)

    @classmethod
    def load(cls, path: str | Path, table: EmbeddingTable | None = None) -> "NeighborCache":
        cache = cls()
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if table is None or blob["version"] == table.content_hash():
            cache._version, cache._store = blob["version"], blob["store"]
        return cache


def query_key(q: Query) -> tuple:
    return (q.known, q.rel, q.direction.value)


def query_neighbors(q: Query, table: EmbeddingTable, k_s: int, cache: NeighborCache | None = None) -> list[int]:
    x = query_embedding(q, table)
    if cache is None:
        return retrieve_pseudo_neighbors(x, table, k_s)
    return cache.neighbors("query", query_key(q), x, table, k_s)


def entity_neighbors(e: int, table: EmbeddingTable, k_s: int, cache: NeighborCache | None = None) -> list[int]:
    x = table.entity_vecs[e]
    if cache is None:
        return retrieve_pseudo_neighbors(x, table, k_s, self_id=e)
    return cache.neighbors("entity", e, x, table, k_s, self_id=e)


def enhance_with_cache(kind: str, ident, table: EmbeddingTable, k_s: int, w: SGNE, cache: NeighborCache) -> EnhancedVector:
    """Enhance a query (``ident`` is a :class:`Query`) or an entity id, reusing cached neighbours."""
    if kind == "query":
        x = query_embedding(ident, table)
        ids = query_neighbors(ident, table, k_s, cache)
        source_id = query_key(ident)
    elif kind == "entity":
        x = table.entity_vecs[ident]
        ids = entity_neighbors(ident, table, k_s, cache)
        source_id = ident
    else:
        raise ValueError(f"kind must be 'query' or 'entity', got {kind!r}")
    nb = table.entity_vecs[ids] if ids else np.zeros((0, table.dim))
    return EnhancedVector(w(torch.from_numpy(x), torch.from_numpy(nb)), kind, source_id)


def neighbor_triples(kg: KnowledgeGraph, neighbor_ids: list[int], exclude: Triple | None = None) -> list[Triple]:
    """Map pseudo-neighbours back to KG facts: each one's lowest-index incident train triple.

    ``exclude`` (the fact being predicted, during training) is never shown.
    """
    out = []
    for e in neighbor_ids:
        t = kg.incident_train_triple(e, exclude)
        if t is not None:
            out.append(t)
    return out

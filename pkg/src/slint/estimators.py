"""scikit-learn style wrappers around the structural encoder and the full re-ranker.

``X`` is a :class:`~slint.data.KnowledgeGraph` for ``fit`` and a sequence of
:class:`~slint.data.Query` for ``transform``/``predict``; there is no tabular
feature matrix in this problem, so ``y`` is always ignored.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import KnowledgeGraph, Query
from .evaluation import evaluate
from .kge import EmbeddingTable, TransEConfig, query_embedding, train_transe
from .trainer import TrainConfig, train


def _check_kg(X) -> KnowledgeGraph:
    if not isinstance(X, KnowledgeGraph):
        raise TypeError(f"expected a KnowledgeGraph, got {type(X).__name__}")
    if not X.train:
        raise ValueError("knowledge graph has an empty train split")
    return X


def _check_queries(X, n_entities: int, n_relations: int) -> list[Query]:
    qs = list(X)
    for q in qs:
        if not isinstance(q, Query):
            raise TypeError(f"expected Query items, got {type(q).__name__}")
        if not (0 <= q.known < n_entities and 0 <= q.rel < n_relations):
            raise ValueError(f"query {q} refers to ids outside the fitted graph")
    return qs


class TransEEmbedder(TransformerMixin, BaseEstimator):
    """Fits TransE on a graph; ``transform`` maps queries to h+r (or t-r) vectors."""

    def __init__(self, dim=32, margin=1.0, lr=0.01, epochs=100, seed=0):
        self.dim = dim
        self.margin = margin
        self.lr = lr
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y=None):
        kg = _check_kg(X)
        cfg = TransEConfig(dim=self.dim, margin=self.margin, lr=self.lr, epochs=self.epochs, seed=self.seed)
        self.table_ = train_transe(kg, cfg)
        self.n_entities_ = len(kg.entities)
        self.n_relations_ = len(kg.relations)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "table_")
        qs = _check_queries(X, self.n_entities_, self.n_relations_)
        if not qs:
            return np.zeros((0, self.dim))
        return np.stack([query_embedding(q, self.table_) for q in qs])

    def score(self, X, y=None, split: str = "valid") -> float:
        """Filtered MRR of the fitted table on ``split`` of graph ``X``."""
        check_is_fitted(self, "table_")
        return evaluate(self.table_, _check_kg(X), split).mrr


class SLiNTRanker(BaseEstimator):
    """TransE candidates re-ranked by the adapter-tuned LM.

    ``extra`` holds any further :class:`~slint.trainer.TrainConfig` keys.
    """

    def __init__(self, lam=0.5, lr=1e-3, batch_size=16, epochs=3, k_s=5, k_c=10, n_c=50, m=20, k_r=1,
                 sgne=True, dhcl=True, gddi=True, seed=0, extra=None):
        self.lam = lam
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.k_s = k_s
        self.k_c = k_c
        self.n_c = n_c
        self.m = m
        self.k_r = k_r
        self.sgne = sgne
        self.dhcl = dhcl
        self.gddi = gddi
        self.seed = seed
        self.extra = extra

    def _config(self) -> TrainConfig:
        keys = ("lam", "lr", "batch_size", "epochs", "k_s", "k_c", "n_c", "m", "k_r", "sgne", "dhcl", "gddi", "seed")
        return TrainConfig.from_dict({**(self.extra or {}), **{k: getattr(self, k) for k in keys}})

    def fit(self, X, y=None, table: EmbeddingTable | None = None):
        kg = _check_kg(X)
        cfg = self._config()
        if table is None:
            table = train_transe(kg, cfg.transe_config())
        self.model_, self.history_ = train(kg, table, cfg)
        return self

    def predict(self, X) -> list[list[int]]:
        """Re-ranked top-m entity ids per query (filtered against known facts)."""
        check_is_fitted(self, "model_")
        kg = self.model_.kg
        qs = _check_queries(X, len(kg.entities), len(kg.relations))
        return [self.model_.rerank(q)[0] for q in qs]

    def score(self, X, y=None, split: str = "valid") -> float:
        check_is_fitted(self, "model_")
        kg = _check_kg(X)
        mode = "slint" if self.model_.cfg.uses_lm else "embedding-only"
        return evaluate(self.model_, kg, split, mode=mode).mrr

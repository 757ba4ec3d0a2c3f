import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from slint.data import Direction, KnowledgeGraph, Query, Vocab
from slint.estimators import SLiNTRanker, TransEEmbedder
from slint.evaluation import evaluate
from slint.kge import query_embedding


def test_params_round_trip_and_clone():
    est = SLiNTRanker(k_s=3, lam=0.0, extra={"pretrain_epochs": 0})
    assert est.get_params()["k_s"] == 3
    est.set_params(m=7)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_embedder_fit_transform_score(micro_kg):
    est = TransEEmbedder(dim=8, epochs=30, lr=0.02, seed=1).fit(micro_kg)
    qs = micro_kg.queries("test")
    X = est.transform(qs)
    assert X.shape == (len(qs), 8)
    np.testing.assert_array_equal(X[0], query_embedding(qs[0], est.table_))
    assert est.score(micro_kg, split="test") == evaluate(est.table_, micro_kg, "test").mrr
    assert est.transform([]).shape == (0, 8)


def test_ranker_fit_predict_score(micro_kg, micro_table):
    est = SLiNTRanker(epochs=1, batch_size=4, k_s=2, k_c=2, n_c=4, m=4, seed=7,
                      extra={"lm_width": 16, "lm_heads": 2, "sgne_hidden": 8, "sgne_heads": 2,
                             "lora_rank": 2, "pretrain_epochs": 1})
    est.fit(micro_kg, table=micro_table)
    preds = est.predict(micro_kg.queries("test"))
    assert all(len(p) == 4 for p in preds)
    assert 0.0 < est.score(micro_kg, split="test") <= 1.0


def test_validation_errors(micro_kg):
    with pytest.raises(NotFittedError):
        TransEEmbedder().transform(micro_kg.queries("test"))
    with pytest.raises(NotFittedError):
        SLiNTRanker().predict(micro_kg.queries("test"))
    with pytest.raises(TypeError):
        TransEEmbedder().fit(np.zeros((3, 3)))
    empty = KnowledgeGraph(Vocab(["a"]), Vocab(["r"]), [], [], [])
    with pytest.raises(ValueError):
        TransEEmbedder().fit(empty)
    est = TransEEmbedder(dim=4, epochs=1).fit(micro_kg)
    with pytest.raises(ValueError):
        est.transform([Query(99, 0, Direction.TAIL, 0)])
    with pytest.raises(TypeError):
        est.transform([(0, 0, 1)])
    with pytest.raises(ValueError):
        SLiNTRanker(lam=-1.0).fit(micro_kg)

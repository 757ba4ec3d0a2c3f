import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slint.data import Direction, KnowledgeGraph, Query, Triple, Vocab
from slint.kge import (
    EmbeddingTable,
    TransEConfig,
    entity_scores,
    init_transe,
    query_embedding,
    rank_candidates,
    train_transe,
)


def _one_triple_kg():
    return KnowledgeGraph(Vocab(["a", "b", "c", "d"]), Vocab(["r"]), [Triple(0, 0, 1)], [], [])


def _table(ents, rels):
    return EmbeddingTable(np.asarray(ents, dtype=float), np.asarray(rels, dtype=float))


def test_single_triple_fits_within_margin():
    kg = _one_triple_kg()
    cfg = TransEConfig(dim=4, epochs=200, lr=0.05, seed=0)
    t = train_transe(kg, cfg)
    a, b = t.entity_vecs[0], t.entity_vecs[1]
    r = t.relation_vecs[0]
    d_pos = np.linalg.norm(a + r - b)
    assert d_pos < cfg.margin
    # gap against the other entities as corrupted tails
    for c in (2, 3):
        assert np.linalg.norm(a + r - t.entity_vecs[c]) > d_pos


def test_zero_epochs_equals_seeded_init():
    kg = _one_triple_kg()
    cfg = TransEConfig(dim=5, epochs=0, seed=11)
    t = train_transe(kg, cfg)
    ent, rel = init_transe(4, 1, cfg)
    np.testing.assert_array_equal(t.entity_vecs, ent.numpy())
    np.testing.assert_array_equal(t.relation_vecs, rel.numpy())


def test_training_is_deterministic(micro_kg):
    cfg = TransEConfig(dim=6, epochs=20, seed=5)
    a, b = train_transe(micro_kg, cfg), train_transe(micro_kg, cfg)
    assert a.content_hash() == b.content_hash()


def test_empty_train_rejected():
    kg = KnowledgeGraph(Vocab(["a", "b"]), Vocab(["r"]), [], [Triple(0, 0, 1)], [])
    with pytest.raises(ValueError):
        train_transe(kg, TransEConfig(epochs=1))


def test_table_validation():
    with pytest.raises(ValueError):
        _table([[np.nan, 0.0]], [[0.0, 0.0]])
    with pytest.raises(ValueError):
        _table([[0.0, 0.0]], [[0.0, 0.0, 0.0]])


def test_save_load_round_trip(tmp_path, micro_table):
    p = tmp_path / "emb.txt"
    micro_table.save(p)
    back = EmbeddingTable.load(p)
    np.testing.assert_array_equal(back.entity_vecs, micro_table.entity_vecs)
    np.testing.assert_array_equal(back.relation_vecs, micro_table.relation_vecs)


def test_query_embedding_directions():
    t = _table([[1.0, 2.0], [0.5, -1.0]], [[0.25, 0.75]])
    np.testing.assert_array_equal(query_embedding(Query(0, 0, Direction.TAIL, 1), t), [1.25, 2.75])
    np.testing.assert_array_equal(query_embedding(Query(1, 0, Direction.HEAD, 0), t), [0.25, -1.75])


def test_exact_translation_lands_on_tail():
    h, r = np.array([0.1, 0.2, 0.3]), np.array([0.5, -0.25, 1.0])
    t = _table([h, h + r, [0.0, 0.0, 1.0]], [r])
    np.testing.assert_array_equal(query_embedding(Query(0, 0, Direction.TAIL, 1), t), t.entity_vecs[1])
    assert rank_candidates(Query(0, 0, Direction.TAIL, 1), t, 1).ids == [1]


def _oracle_topm(q, table, m, excl):
    scores = entity_scores(q, table)
    ranked = sorted((i for i in range(len(scores)) if i not in excl), key=lambda i: (-scores[i], i))
    return ranked[:m]


def test_full_ranking_is_permutation(micro_kg, micro_table):
    for q in micro_kg.queries("train"):
        ids = rank_candidates(q, micro_table, micro_kg.n_entities).ids
        assert sorted(ids) == list(range(micro_kg.n_entities))


def test_topm_matches_bruteforce_on_fixture(micro_kg, micro_table):
    for split in ("train", "valid", "test"):
        for q in micro_kg.queries(split):
            assert rank_candidates(q, micro_table, 3).ids == _oracle_topm(q, micro_table, 3, set())


def test_ties_break_by_id():
    t = _table([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [[0.0, 0.0]])
    # entities 1, 2, 3 are equidistant from entity 0
    assert rank_candidates(Query(0, 0, Direction.TAIL, 1), t, 4).ids == [0, 1, 2, 3]


def test_bad_m():
    t = _table([[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        rank_candidates(Query(0, 0, Direction.TAIL, 0), t, 0)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(2, 30),
    m=st.integers(1, 35),
    seed=st.integers(0, 10_000),
    excl_frac=st.floats(0.0, 0.9),
    quantize=st.booleans(),
)
def test_topm_oracle_property(n, m, seed, excl_frac, quantize):
    rng = np.random.default_rng(seed)
    ents = rng.normal(size=(n, 3))
    if quantize:
        ents = np.round(ents)  # force many exact ties
    t = _table(ents, rng.normal(size=(2, 3)))
    q = Query(int(rng.integers(n)), 1, Direction.HEAD, 0)
    excl = {i for i in range(n) if rng.random() < excl_frac}
    got = rank_candidates(q, t, m, excl).ids
    assert got == _oracle_topm(q, t, m, excl)
    assert not set(got) & excl

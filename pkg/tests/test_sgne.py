import numpy as np
import pytest
import torch
from torch.func import functional_call
from hypothesis import given, settings
from hypothesis import strategies as st

from slint.kge import EmbeddingTable, query_embedding
from slint.numerics import DTYPE, bind_flat, flat_params, grad_check, silu
from slint.sgne import (
    SGNE,
    NeighborCache,
    enhance,
    enhance_with_cache,
    entity_neighbors,
    neighbor_triples,
    query_neighbors,
    retrieve_pseudo_neighbors,
)


def cosine_oracle(x, mat, k, self_id=None):
    sims = []
    for i, row in enumerate(mat):
        if i == self_id:
            continue
        n = np.linalg.norm(row)
        s = -np.inf if n == 0 else float(row @ x) / (n * np.linalg.norm(x))
        sims.append((-s, i))
    return [i for _, i in sorted(sims)[:k]]


def _table(rows):
    rows = np.asarray(rows, dtype=float)
    return EmbeddingTable(rows, np.zeros((1, rows.shape[1])))


def test_self_exclusion_picks_most_aligned_other():
    t = _table([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.9, 0.1, 0.0], [0.0, 0.0, 1.0]])
    assert retrieve_pseudo_neighbors(t.entity_vecs[0], t, 1, self_id=0) == [2]
    assert retrieve_pseudo_neighbors(t.entity_vecs[0], t, 1) == [0]


def test_k_larger_than_pool_returns_all():
    t = _table([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert sorted(retrieve_pseudo_neighbors(np.array([1.0, 0.0]), t, 10)) == [0, 1, 2]
    assert sorted(retrieve_pseudo_neighbors(np.array([1.0, 0.0]), t, 10, self_id=1)) == [0, 2]


def test_retrieval_errors():
    t = _table([[1.0, 0.0]])
    with pytest.raises(ValueError):
        retrieve_pseudo_neighbors(np.array([1.0, 0.0]), t, 0)


def test_fixture_retrieval_matches_oracle(micro_kg, micro_table):
    for e in range(micro_kg.n_entities):
        x = micro_table.entity_vecs[e]
        assert entity_neighbors(e, micro_table, 3) == cosine_oracle(x, micro_table.entity_vecs, 3, e)
    for q in micro_kg.queries("train"):
        x = query_embedding(q, micro_table)
        assert query_neighbors(q, micro_table, 3) == cosine_oracle(x, micro_table.entity_vecs, 3)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 25), k=st.integers(1, 30), seed=st.integers(0, 9999), ties=st.booleans())
def test_retrieval_oracle_property(n, k, seed, ties):
    rng = np.random.default_rng(seed)
    rows = rng.integers(-1, 2, size=(n, 3)).astype(float) if ties else rng.normal(size=(n, 3))
    x = rng.normal(size=3)
    t = _table(rows)
    assert retrieve_pseudo_neighbors(x, t, k) == cosine_oracle(x, rows, k)
    sid = int(rng.integers(n))
    assert retrieve_pseudo_neighbors(x, t, k, self_id=sid) == cosine_oracle(x, rows, k, sid)


def _sgne(d=6, dp=10, h=8, heads=2, seed=0):
    return SGNE(d, dp, h, heads, seed=seed)


def test_output_shape_and_batching():
    w = _sgne()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 6, generator=g, dtype=DTYPE)
    nb = torch.randn(4, 3, 6, generator=g, dtype=DTYPE)
    out = w(x, nb)
    assert out.shape == (4, 10)
    for i in range(4):
        assert torch.allclose(out[i], w(x[i], nb[i]), atol=1e-14, rtol=0)


def test_empty_neighbors_is_single_token_attention():
    w = _sgne()
    x = torch.randn(6, dtype=DTYPE)
    out = w(x, torch.zeros(0, 6, dtype=DTYPE))
    h = silu(x @ w.w_in)
    # softmax over one key is 1, so attention reduces to the value/output maps
    expected = (h @ w.attention.w_v @ w.attention.w_o) @ w.w_out
    assert torch.allclose(out, expected, atol=1e-13, rtol=0)


def test_neighbor_permutation_invariance():
    w = _sgne(seed=3)
    g = torch.Generator().manual_seed(3)
    x = torch.randn(6, generator=g, dtype=DTYPE)
    nb = torch.randn(5, 6, generator=g, dtype=DTYPE)
    base = w(x, nb)
    for _ in range(5):
        perm = torch.randperm(5, generator=g)
        assert torch.allclose(w(x, nb[perm]), base, atol=1e-12, rtol=0)


def test_dimension_mismatch():
    w = _sgne()
    with pytest.raises(ValueError):
        w(torch.zeros(5, dtype=DTYPE), torch.zeros(2, 6, dtype=DTYPE))
    with pytest.raises(ValueError):
        w(torch.zeros(6, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE))


def test_enhance_gradient_all_weights():
    w = _sgne(d=3, dp=4, h=4, heads=2, seed=7)
    g = torch.Generator().manual_seed(7)
    x = torch.randn(3, generator=g, dtype=DTYPE)
    nb = torch.randn(2, 3, generator=g, dtype=DTYPE)
    names, params = zip(*w.named_parameters())

    def f(flat):
        return (functional_call(w, dict(zip(names, bind_flat(params, flat))), (x, nb)) ** 2).sum()

    assert grad_check(f, flat_params(params)) < 1e-4


def test_enhance_wrapper_records_source():
    w = _sgne()
    ev = enhance(torch.ones(6, dtype=DTYPE), torch.ones(2, 6, dtype=DTYPE), w, "candidate", 3)
    assert ev.source == "candidate" and ev.source_id == 3 and ev.vec.shape == (10,)


def test_cache_hit_is_bit_identical(micro_kg, micro_table):
    w = SGNE(micro_table.dim, 8, 8, 2, seed=1)
    cache = NeighborCache()
    q = micro_kg.queries("train")[0]
    a = enhance_with_cache("query", q, micro_table, 3, w, cache)
    assert (cache.hits, cache.misses) == (0, 1)
    b = enhance_with_cache("query", q, micro_table, 3, w, cache)
    assert (cache.hits, cache.misses) == (1, 1)
    assert torch.equal(a.vec, b.vec)


def test_cached_equals_uncached_on_100_queries(micro_kg, micro_table, rng):
    w = SGNE(micro_table.dim, 8, 8, 2, seed=2)
    cache = NeighborCache()
    qs = micro_kg.queries("train") + micro_kg.queries("valid") + micro_kg.queries("test")
    for _ in range(100):
        q = qs[int(rng.integers(len(qs)))]
        cached = enhance_with_cache("query", q, micro_table, 3, w, cache)
        ids = retrieve_pseudo_neighbors(query_embedding(q, micro_table), micro_table, 3)
        fresh = w(torch.from_numpy(query_embedding(q, micro_table)), torch.from_numpy(micro_table.entity_vecs[ids]))
        assert torch.equal(cached.vec, fresh)
        e = int(rng.integers(micro_kg.n_entities))
        assert cache.neighbors("entity", e, micro_table.entity_vecs[e], micro_table, 3, e) == \
            retrieve_pseudo_neighbors(micro_table.entity_vecs[e], micro_table, 3, e)
    assert cache.hits > 0


def test_stale_cache_is_rebuilt(micro_kg, micro_table):
    cache = NeighborCache()
    q = micro_kg.queries("train")[0]
    query_neighbors(q, micro_table, 2, cache)
    other = EmbeddingTable(micro_table.entity_vecs[::-1].copy(), micro_table.relation_vecs)
    got = query_neighbors(q, other, 2, cache)
    assert got == retrieve_pseudo_neighbors(query_embedding(q, other), other, 2)
    assert cache.misses == 2 and len(cache) == 1


def test_cache_persistence(tmp_path, micro_kg, micro_table):
    cache = NeighborCache()
    for q in micro_kg.queries("train"):
        query_neighbors(q, micro_table, 2, cache)
    p = tmp_path / "cache.pkl"
    cache.save(p)
    back = NeighborCache.load(p, micro_table)
    assert len(back) == len(cache)
    stale = NeighborCache.load(p, EmbeddingTable(micro_table.entity_vecs * 2, micro_table.relation_vecs))
    assert len(stale) == 0


def test_enhance_with_cache_bad_kind(micro_table):
    with pytest.raises(ValueError):
        enhance_with_cache("relation", 0, micro_table, 2, SGNE(micro_table.dim, 4, 4, 2), NeighborCache())


def test_neighbor_triples_lowest_index_and_exclusion(micro_kg):
    falcon, eagle, bison = (micro_kg.entities.id(n) for n in ("falcon", "eagle", "bison"))
    first = micro_kg.train[0]
    assert neighbor_triples(micro_kg, [falcon]) == [first]
    # the fact being predicted is never shown; the next incident fact takes its place
    assert neighbor_triples(micro_kg, [falcon], exclude=first) == [micro_kg.train[1]]
    # bison has a single train fact; excluding it leaves nothing to show
    only = next(t for t in micro_kg.train if bison in (t.head, t.tail))
    assert neighbor_triples(micro_kg, [bison], exclude=only) == []
    assert neighbor_triples(micro_kg, [eagle, bison]) == [first, only]

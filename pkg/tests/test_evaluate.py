import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgeo.evaluate import (DEFAULT_TTA, TRANSFORMS, RetrievalResult, average_precision,
                            compute_metrics, embed_batch_tta, embed_with_tta, rank,
                            read_embeddings, write_embeddings)
from oracles import average_precision_loop, rank_loop


def unit_rows(a):
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


class LinearPipeline:
    """Toy embedding function: a fixed random projection of the flattened image."""

    def __init__(self, shape, dim=6, seed=0):
        self.w = np.random.default_rng(seed).normal(size=(int(np.prod(shape)), dim))

    def __call__(self, images):
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        return unit_rows(arr.reshape(len(arr), -1) @ self.w)


def test_self_match_ranks_first(rng):
    gallery = unit_rows(rng.normal(size=(10, 5)))
    ids = [f"g{i}" for i in range(10)]
    res = rank(gallery[3:4], gallery, ["q"], ids)[0]
    assert res.ranked[0][0] == "g3"
    assert res.ranked[0][1] == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_ties_ordered_by_id():
    q = np.array([[1.0, 0, 0, 0]])
    gallery = np.array([[0, 0, 1.0, 0], [0, 1.0, 0, 0], [1.0, 0, 0, 0], [0, 0, 0, 1.0]])
    ids = ["c", "b", "z", "a"]
    res = rank(q, gallery, ["q"], ids, ["z"], ids)[0]
    assert [g for g, _ in res.ranked] == ["z", "a", "b", "c"]
    assert res.true_ids == {"z"}


def test_rank_matches_full_sort_oracle(rng):
    q, g = unit_rows(rng.normal(size=(20, 8))), unit_rows(rng.normal(size=(50, 8)))
    g[7] = g[3]  # an exact duplicate forces a tie
    gids = [f"g{i:02d}" for i in range(50)]
    for qi, res in enumerate(rank(q, g, [f"q{i}" for i in range(20)], gids)):
        order, scores = rank_loop(q[qi], g, gids)
        assert [x for x, _ in res.ranked] == order
        assert max(abs(s - scores[x]) for x, s in res.ranked) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_rank_invariant_to_gallery_order(n, seed):
    r = np.random.default_rng(seed)
    # small integer vectors produce many exact ties
    g = r.integers(-1, 2, size=(n, 3)).astype(float)
    q = r.integers(-1, 2, size=(2, 3)).astype(float)
    ids = [f"g{i}" for i in range(n)]
    perm = r.permutation(n)
    a = rank(q, g, ["a", "b"], ids)
    b = rank(q, g[perm], ["a", "b"], [ids[i] for i in perm])
    assert [x.ranked for x in a] == [x.ranked for x in b]


def test_perfect_retrieval():
    results = [RetrievalResult(f"q{i}", [(f"g{i}", 1.0), ("x", 0.5)], {f"g{i}"}) for i in range(3)]
    rep = compute_metrics(results)
    assert rep.recall_at == {1: 100.0, 5: 100.0, 10: 100.0}
    assert rep.ap == 100.0


def test_true_item_at_rank_four():
    ranked = [(f"g{i}", 1.0 - i / 10) for i in range(10)]
    rep = compute_metrics([RetrievalResult("q", ranked, {"g3"})])
    assert rep.recall_at == {1: 0.0, 5: 100.0, 10: 100.0}
    assert rep.ap == pytest.approx(25.0, abs=1e-9)
    assert compute_metrics([RetrievalResult("q", ranked, {"g3"})], ap_mode="first").ap == pytest.approx(25.0)


def test_query_without_relevant_item_is_excluded():
    results = [RetrievalResult("q0", [("g0", 1.0)], {"g0"}),
               RetrievalResult("q1", [("g0", 1.0)], {"missing"})]
    rep = compute_metrics(results)
    assert rep.n_queries == 1 and rep.excluded == ["q1"]
    assert rep.recall_at[1] == 100.0
    with pytest.raises(ValueError):
        compute_metrics(results, ap_mode="mean")


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_ap_matches_exhaustive_oracle(n, seed):
    r = np.random.default_rng(seed)
    ranked = [f"g{i}" for i in r.permutation(n)]
    k = int(r.integers(1, n + 1))
    relevant = set(r.choice(ranked, size=k, replace=False).tolist())
    assert abs(average_precision(ranked, relevant) - average_precision_loop(ranked, relevant)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 2 ** 32 - 1))
def test_metric_invariants(n_gallery, n_queries, seed):
    r = np.random.default_rng(seed)
    g = unit_rows(r.normal(size=(n_gallery, 4)))
    q = unit_rows(r.normal(size=(n_queries, 4)))
    gids = [f"g{i}" for i in range(n_gallery)]
    labels = [gids[int(r.integers(n_gallery))] for _ in range(n_queries)]
    results = rank(q, g, [f"q{i}" for i in range(n_queries)], gids, labels, gids)
    rep = compute_metrics(results)
    assert rep.recall_at[1] <= rep.recall_at[5] <= rep.recall_at[10]
    assert all(0 <= v <= 100 for v in (*rep.recall_at.values(), rep.ap))
    for res in results:
        ap = 100 * average_precision([x for x, _ in res.ranked], res.true_ids)
        assert 100 / n_gallery - 1e-9 <= ap <= 100 + 1e-9
    shuffled = [results[i] for i in r.permutation(len(results))]
    rep2 = compute_metrics(shuffled)
    assert rep2.recall_at == rep.recall_at
    assert rep2.ap == pytest.approx(rep.ap, abs=1e-9)


def test_embedding_dump_round_trip(tmp_path, rng):
    vecs = unit_rows(rng.normal(size=(4, 6)))
    ids, labels = ["a/ü.png", "b", "c", "d"], ["0001", "0002", "0001", "0003"]
    write_embeddings(tmp_path / "e.bin", ids, labels, vecs)
    rids, rlabels, rvecs = read_embeddings(tmp_path / "e.bin")
    assert rids == ids and rlabels == labels
    assert np.array_equal(rvecs, vecs.astype(np.float32))
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        read_embeddings(tmp_path / "bad.bin")


def test_tta_singleton_is_plain_embedding(rng):
    pipe = LinearPipeline((4, 4, 3))
    img = rng.normal(size=(4, 4, 3))
    assert np.allclose(embed_with_tta(img, pipe, ("identity",)), pipe(img)[0], atol=1e-15)


def test_tta_flip_invariance(rng):
    pipe = LinearPipeline((4, 4, 3))
    img = rng.normal(size=(4, 4, 3))
    tta = ("identity", "hflip")
    assert np.array_equal(embed_with_tta(img, pipe, tta), embed_with_tta(img[:, ::-1], pipe, tta))


def test_tta_matches_loop_oracle(rng):
    pipe = LinearPipeline((5, 5, 3), seed=2)
    images = rng.normal(size=(3, 5, 5, 3))
    tta = DEFAULT_TTA["satellite"]
    got = embed_batch_tta(images, pipe, tta, batch_size=2)
    for i, img in enumerate(images):
        acc = [0.0] * 6
        for name in tta:
            e = pipe(np.ascontiguousarray(TRANSFORMS[name](img)))[0]
            acc = [a + float(v) for a, v in zip(acc, e)]
        acc = [a / len(tta) for a in acc]
        norm = sum(a * a for a in acc) ** 0.5
        assert np.allclose(got[i], [a / norm for a in acc], atol=1e-12)
        assert np.allclose(embed_with_tta(img, pipe, tta), got[i], atol=1e-12)
    with pytest.raises(ValueError):
        embed_with_tta(images[0], pipe, ())

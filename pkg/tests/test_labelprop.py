import math

import numpy as np
import pytest

from udgenre.cluster import ClusterAssignment
from udgenre.corpus import Corpus, GenreLabel, Sentence, Treebank
from udgenre.features import EmbeddingStore
from udgenre.labelprop import (
    PropagationError,
    TreebankClusters,
    cluster_all_treebanks,
    cosine_distance,
    euclidean_distance,
    propagate_labels,
    to_predictions,
)
from udgenre.predictions import PredictionSet

from conftest import make_corpus, make_sentence, store_from_rows

EASY_NGRAMS = {"n_min": 3, "n_max": 3, "min_df": 1, "max_df_frac": 1.0}


def manual_clusters(tb_id, genres, member_counts, centroids):
    """TreebankClusters with hand-placed centroids and synthetic members."""
    genres = tuple(GenreLabel(g) for g in genres)
    refs, labels = [], []
    for c, count in enumerate(member_counts):
        for i in range(count):
            refs.append((tb_id, f"{tb_id}-c{c}-s{i}"))
            labels.append(c)
    assignment = ClusterAssignment(scope=tb_id, refs=refs,
                                   labels=np.asarray(labels, dtype=np.int64),
                                   k=len(genres))
    return TreebankClusters(treebank=tb_id, k=len(genres), assignment=assignment,
                            centroids=np.asarray(centroids, dtype=np.float64),
                            sizes=np.asarray(member_counts, dtype=np.int64),
                            metadata_genres=genres)


def blob_corpus_and_store(rng, layout, d=8, scale=10.0, spread=0.5,
                          n_per=20):
    """layout: list of (tb_id, [genre names]); genre i gets center scale*e_i.

    Sentences of a multi-genre treebank are split evenly across its genres'
    blobs, giving planted per-treebank clusters.
    """
    genre_order = []
    for _, genres in layout:
        for g in genres:
            if g not in genre_order:
                genre_order.append(g)
    centers = {g: scale * np.eye(d)[i % d] for i, g in enumerate(genre_order)}

    treebanks, refs, rows, planted = [], [], [], {}
    for tb_id, genres in layout:
        sents = []
        for i in range(n_per):
            genre = genres[i % len(genres)]
            sid = f"{tb_id}-s{i:03d}"
            sents.append(make_sentence(sid))
            refs.append((tb_id, sid))
            rows.append(rng.normal(loc=centers[genre], scale=spread))
            planted[(tb_id, sid)] = GenreLabel(genre)
        treebanks.append(Treebank(tb_id, "xx", {"train": sents},
                                  tuple(GenreLabel(g) for g in genres)))
    store = store_from_rows(refs, np.asarray(rows, dtype=np.float32))
    return Corpus(treebanks=treebanks), store, planted


# ---------------------------------------------------------------------------
# container

def test_treebank_clusters_validation():
    tc = manual_clusters("tb", ["news", "wiki"], [3, 2], np.zeros((2, 4)))
    assert tc.labels == [None, None]
    tc.set_label(0, GenreLabel.NEWS, score=0.1, round_=1)
    with pytest.raises(PropagationError, match="already labeled"):
        tc.set_label(0, GenreLabel.WIKI, score=0.1, round_=1)
    with pytest.raises(PropagationError, match="already has a cluster"):
        tc.set_label(1, GenreLabel.NEWS, score=0.1, round_=1)
    with pytest.raises(PropagationError, match="not in"):
        tc.set_label(1, GenreLabel.POETRY, score=0.1, round_=1)
    with pytest.raises(PropagationError, match="does not equal"):
        asg = ClusterAssignment(scope="tb", refs=[("tb", "s0")],
                                labels=np.array([0]), k=2)
        TreebankClusters(treebank="tb", k=2, assignment=asg,
                         centroids=np.zeros((2, 4)),
                         sizes=np.array([1, 0]),
                         metadata_genres=(GenreLabel.NEWS,))


# ---------------------------------------------------------------------------
# distances

def test_cosine_distance_basics():
    a = np.array([1.0, 0.0])
    assert cosine_distance(a, np.array([2.0, 0.0])) == pytest.approx(0.0)
    assert cosine_distance(a, np.array([0.0, 3.0])) == pytest.approx(1.0)
    assert cosine_distance(a, np.array([-1.0, 0.0])) == pytest.approx(2.0)
    assert cosine_distance(a, np.zeros(2)) == 2.0
    assert euclidean_distance(a, np.array([4.0, 4.0])) == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# per-treebank clustering

def test_single_genre_treebank_is_one_cluster(rng):
    corpus, store, _ = blob_corpus_and_store(rng, [("a", ["news"])], n_per=40)
    tcs = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    assert len(tcs) == 1
    assert tcs[0].k == 1
    assert tcs[0].sizes.tolist() == [40]
    np.testing.assert_allclose(
        tcs[0].centroids[0],
        store.rows.astype(np.float64).mean(axis=0), rtol=1e-6)


def test_two_genre_treebank_recovers_blobs(rng):
    corpus, store, planted = blob_corpus_and_store(
        rng, [("b", ["news", "wiki"])], n_per=40, scale=10.0, spread=0.5)
    tcs = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    tc = tcs[0]
    assert tc.k == 2
    by_cluster = {}
    for ref, c in zip(tc.assignment.refs, tc.assignment.labels):
        by_cluster.setdefault(int(c), set()).add(planted[ref])
    # each cluster is genre-pure
    assert all(len(v) == 1 for v in by_cluster.values())
    assert len(by_cluster) == 2


def test_lda_clustering_uses_embedding_centroids(rng):
    # texts are genre-disjoint character soup so lda separates them
    sents, refs, rows = [], [], []
    for i in range(30):
        genre = "news" if i % 2 == 0 else "wiki"
        word = "aaa bbb" if genre == "news" else "xxx yyy"
        sid = f"s{i:03d}"
        sents.append(make_sentence(sid, text=f"{word} {word}"))
        refs.append(("b", sid))
        center = np.zeros(4) if genre == "news" else 10.0 * np.ones(4)
        rows.append(rng.normal(loc=center, scale=0.1))
    tb = Treebank("b", "xx", {"train": sents},
                  (GenreLabel.NEWS, GenreLabel.WIKI))
    corpus = Corpus(treebanks=[tb])
    store = store_from_rows(refs, np.asarray(rows, dtype=np.float32))
    tcs = cluster_all_treebanks(corpus, "lda", store, seed=41,
                                ngram_params=EASY_NGRAMS)
    tc = tcs[0]
    # centroids live in embedding space (dim 4), not n-gram space
    assert tc.centroids.shape == (2, 4)
    for c in range(2):
        members = [r for r, lbl in zip(tc.assignment.refs, tc.assignment.labels)
                   if lbl == c]
        expected = store.rows_for(members).astype(np.float64).mean(axis=0)
        np.testing.assert_allclose(tc.centroids[c], expected, rtol=1e-6)


def test_fewer_sentences_than_k_flagged(rng):
    sents = [make_sentence("s1"), make_sentence("s2")]
    tb = Treebank("tiny", "xx", {"train": sents},
                  (GenreLabel.NEWS, GenreLabel.WIKI, GenreLabel.BLOG))
    corpus = Corpus(treebanks=[tb])
    store = store_from_rows([("tiny", "s1"), ("tiny", "s2")],
                            rng.normal(size=(2, 4)).astype(np.float32))
    tcs = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    tc = tcs[0]
    assert tc.sizes.tolist() == [2, 0, 0]
    assert any("only 2 sentences" in f for f in tc.flags)
    assert np.isnan(tc.centroids[1]).all() and np.isnan(tc.centroids[2]).all()


def test_empty_ngram_vocabulary_flagged(rng):
    sents = [Sentence(f"s{i}", "ab", ("ab",)) for i in range(6)]
    tb = Treebank("short", "xx", {"train": sents},
                  (GenreLabel.NEWS, GenreLabel.WIKI))
    corpus = Corpus(treebanks=[tb])
    store = store_from_rows([("short", f"s{i}") for i in range(6)],
                            rng.normal(size=(6, 4)).astype(np.float32))
    tcs = cluster_all_treebanks(corpus, "lda", store, seed=41,
                                ngram_params=EASY_NGRAMS)
    assert any("empty n-gram vocabulary" in f for f in tcs[0].flags)
    assert tcs[0].sizes.tolist() == [6, 0]


def test_missing_embeddings_error(rng):
    corpus = make_corpus([("a", ["news"], {"train": 3})])
    store = store_from_rows([("a", "a-train-0000")],
                            rng.normal(size=(1, 4)).astype(np.float32))
    with pytest.raises(PropagationError, match="2 sentences lack embeddings"):
        cluster_all_treebanks(corpus, "gmm", store, seed=41)


def test_restrict_limits_scope(rng):
    corpus, store, _ = blob_corpus_and_store(rng, [("a", ["news"])], n_per=20)
    keep = set(list(store.index)[:5])
    tcs = cluster_all_treebanks(corpus, "gmm", store, seed=41, restrict=keep)
    assert tcs[0].sizes.tolist() == [5]
    assert set(tcs[0].assignment.refs) == keep


def test_clustering_is_seed_deterministic(rng):
    corpus, store, _ = blob_corpus_and_store(
        rng, [("a", ["news", "wiki"]), ("b", ["spoken", "fiction"])], n_per=30)
    t1 = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    t2 = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.assignment.labels, b.assignment.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)


# ---------------------------------------------------------------------------
# propagation

def test_hand_computed_two_treebank_fixture():
    # A{news} seeds the pool at (1, 0); B's cluster 0 points nearly the same
    # way, cluster 1 is orthogonal, so cluster 0 takes news in round 1 and
    # closure gives cluster 1 wiki (wiki never enters the pool)
    a = manual_clusters("a", ["news"], [4], [[1.0, 0.0]])
    b = manual_clusters("b", ["news", "wiki"], [3, 3],
                        [[0.9, 0.1], [0.0, 1.0]])
    assert cosine_distance(np.array([0.9, 0.1]), np.array([1.0, 0.0])) < \
        cosine_distance(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    result = propagate_labels([a, b], rounds=3)
    assert b.labels == [GenreLabel.NEWS, GenreLabel.WIKI]
    assert b.label_rounds[0] == 1
    assert b.label_rounds[1] == 4  # closure round = rounds + 1
    assert math.isnan(b.label_scores[1])
    assert result.residue == []


def test_propagation_prefers_nearer_cluster():
    # both of B's clusters could take news; the closer one must win
    a = manual_clusters("a", ["news"], [4], [[1.0, 0.0]])
    b = manual_clusters("b", ["news", "wiki"], [3, 3],
                        [[0.5, 0.5], [0.99, 0.01]])
    propagate_labels([a, b], rounds=3)
    assert b.labels[1] is GenreLabel.NEWS
    assert b.labels[0] is GenreLabel.WIKI


def test_unreachable_genre_goes_to_residue():
    # B has two genres with no seed for either; nothing can be labeled
    a = manual_clusters("a", ["news"], [4], [[1.0, 0.0]])
    b = manual_clusters("b", ["poetry", "wiki"], [3, 3],
                        [[0.5, 0.5], [0.0, 1.0]])
    result = propagate_labels([a, b], rounds=3)
    assert len(result.residue) == 2
    assert {e["cluster_index"] for e in result.residue} == {0, 1}
    assert result.residue[0]["unassigned_genres"] == [GenreLabel.POETRY,
                                                      GenreLabel.WIKI]


def test_pool_grows_across_rounds_and_is_monotone():
    a = manual_clusters("a", ["news"], [4], [[1.0, 0.0, 0.0]])
    w = manual_clusters("w", ["wiki"], [4], [[0.0, 1.0, 0.0]])
    b = manual_clusters("b", ["news", "wiki"], [3, 3],
                        [[0.9, 0.1, 0.0], [0.1, 0.9, 0.0]])
    # c's news cluster is nearer b's news centroid than a's seed; it can
    # only be labeled after b joins the pool
    c = manual_clusters("c", ["news", "spoken"], [3, 3],
                        [[0.89, 0.11, 0.0], [0.0, 0.0, 1.0]])
    result = propagate_labels([a, w, b, c], rounds=3)
    assert b.labels == [GenreLabel.NEWS, GenreLabel.WIKI]
    assert c.labels == [GenreLabel.NEWS, GenreLabel.SPOKEN]
    for genre in (GenreLabel.NEWS, GenreLabel.WIKI):
        sizes = [h.get(genre, 0) for h in result.pool_history]
        assert sizes == sorted(sizes)
    news_sizes = [h.get(GenreLabel.NEWS, 0) for h in result.pool_history]
    assert news_sizes[-1] >= 3  # a, b, c clusters all pooled


def test_propagation_invariant_under_input_permutation(rng):
    def build():
        tcs = [manual_clusters("s_news", ["news"], [4], [[1.0, 0.0, 0.0]]),
               manual_clusters("s_wiki", ["wiki"], [4], [[0.0, 1.0, 0.0]]),
               manual_clusters("s_blog", ["blog"], [4], [[0.0, 0.0, 1.0]])]
        for i in range(6):
            c0 = rng_fixed[i][0]
            tcs.append(manual_clusters(
                f"m{i}", ["news", "wiki"], [3, 3], rng_fixed[i]))
        return tcs

    rng_fixed = [np.random.default_rng(100 + i).normal(size=(2, 3)).tolist()
                 for i in range(6)]
    baseline = build()
    propagate_labels(baseline, rounds=3)
    expected = {(tc.treebank, c): tc.labels[c]
                for tc in baseline for c in range(tc.k)}
    for trial in range(10):
        tcs = build()
        order = rng.permutation(len(tcs))
        shuffled = [tcs[i] for i in order]
        propagate_labels(shuffled, rounds=3)
        got = {(tc.treebank, c): tc.labels[c] for tc in tcs for c in range(tc.k)}
        assert got == expected


def test_planted_end_to_end_recovery(rng):
    layout = [("s_news", ["news"]), ("s_wiki", ["wiki"]),
              ("s_spoken", ["spoken"]),
              ("m1", ["news", "wiki"]), ("m2", ["wiki", "spoken"]),
              ("m3", ["news", "spoken"])]
    corpus, store, planted = blob_corpus_and_store(rng, layout, n_per=30,
                                                   scale=12.0, spread=0.4)
    tcs = cluster_all_treebanks(corpus, "gmm", store, seed=41)
    result = propagate_labels(tcs, rounds=3)
    assert result.residue == []
    preds = to_predictions(tcs, method="gmm+l", seed=41)
    got = preds.as_dict()
    assert got == planted


def test_report_and_residue_tsv():
    a = manual_clusters("a", ["news"], [4], [[1.0, 0.0]])
    b = manual_clusters("b", ["poetry", "wiki"], [3, 3],
                        [[0.5, 0.5], [0.0, 1.0]])
    result = propagate_labels([a, b], rounds=3)
    report = result.report_tsv()
    assert "a\t0\tnews\t0.000000\t0" in report
    residue = result.residue_tsv()
    assert "b\t0\t3\tpoetry,wiki" in residue
    assert "b\t1\t3\tpoetry,wiki" in residue


# ---------------------------------------------------------------------------
# predictions

def test_to_predictions_broadcasts_membership():
    a = manual_clusters("a", ["news"], [5], [[1.0, 0.0]])
    a.set_label(0, GenreLabel.NEWS, 0.0, 0)
    preds = to_predictions([a], method="gmm+l", seed=41)
    assert len(preds) == 5
    assert all(g is GenreLabel.NEWS for g in preds.labels)
    b = manual_clusters("b", ["news", "wiki"], [3, 2], [[1, 0], [0, 1]])
    b.set_label(0, GenreLabel.NEWS, 0.1, 1)
    b.set_label(1, GenreLabel.WIKI, 0.2, 1)
    preds = to_predictions([a, b], method="gmm+l", seed=41)
    counts = {}
    for g in preds.labels:
        counts[g] = counts.get(g, 0) + 1
    assert counts == {GenreLabel.NEWS: 8, GenreLabel.WIKI: 2}


def test_to_predictions_rejects_unlabeled_nonempty():
    b = manual_clusters("b", ["news", "wiki"], [3, 2], [[1, 0], [0, 1]])
    b.set_label(0, GenreLabel.NEWS, 0.1, 1)
    with pytest.raises(PropagationError, match="unlabeled"):
        to_predictions([b], method="gmm+l", seed=41)


def test_to_predictions_skips_empty_unlabeled():
    tc = manual_clusters("t", ["news", "wiki"], [4, 0], [[1, 0], [0, 1]])
    tc.set_label(0, GenreLabel.NEWS, 0.1, 1)
    preds = to_predictions([tc], method="gmm+l", seed=41)
    assert len(preds) == 4


def test_prediction_set_tsv_round_trip(rng):
    refs = [("tb_a", f"s{i}") for i in range(6)]
    simplex = rng.dirichlet(np.ones(18), size=6)
    idx = np.argmax(simplex, axis=1)
    preds = PredictionSet(method="class", seed=42, refs=refs,
                          label_idx=idx, simplex=simplex)
    text = preds.to_tsv()
    lines = text.strip().split("\n")
    assert all(len(line.split("\t")) == 6 for line in lines)
    assert lines[0].startswith("class\ttb_a\ts0\t")
    assert lines[0].endswith("\t42")
    back = PredictionSet.from_tsv(text)
    assert back.method == "class" and back.seed == 42
    assert back.refs == refs
    np.testing.assert_array_equal(back.label_idx, idx)
    np.testing.assert_allclose(back.scores,
                               simplex[np.arange(6), idx], atol=1e-6)

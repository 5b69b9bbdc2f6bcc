import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reltab.baselines import (
    CID,
    FULL_WALKS,
    RID,
    TOKEN,
    SkipGramConfig,
    SkipGramModel,
    WalkConfig,
    baseline_rank,
    baseline_scores,
    build_tripartite_graph,
    column_vectors,
    random_walk_corpus,
    sample_noise,
    skipgram_pairs,
    table2vec_corpus,
    token_label,
    train_embdi,
    train_skipgram,
    train_table2vec,
    walks_to_sentences,
    write_walks,
)
from reltab.errors import EmptyContext
from reltab.evaluation import random_mrr
from reltab.ingest import database_from_rows
from reltab.schema import build_schema
from reltab.synthetic import fd_split, functional_dependency

TOY_SCHEMA = build_schema({"tables": [{"name": "t", "columns": [{"name": "a"}, {"name": "b"}, {"name": "c"}]}]})


def toy_db(rows=(("a1", "b1", "c1"), ("a2", "b2", "c2"))):
    return database_from_rows(TOY_SCHEMA, {"t": list(rows)})


class TestTable2VecCorpus:
    def test_five_column_row_gives_twenty_pairs(self):
        from test_ingest import CAST_SCHEMA

        db = database_from_rows(CAST_SCHEMA, {"cast": [("Matt Damon", "Christopher Nolan", "Interstellar",
                                                        "Mann", "2014")]})
        corpus = table2vec_corpus(db)
        assert len(corpus) == 1 and len(corpus[0]) == 5
        pairs = skipgram_pairs([np.arange(5)], window=None)
        assert len(pairs) == 20
        assert len({tuple(p) for p in pairs}) == 20

    def test_empty_table(self):
        assert table2vec_corpus(database_from_rows(TOY_SCHEMA, {"t": []})) == []

    def test_one_sentence_per_row(self, movie_db):
        assert len(table2vec_corpus(movie_db)) == movie_db.n_rows()
        assert len(table2vec_corpus(movie_db, holdout=[("movies", 0)])) == movie_db.n_rows() - 1

    def test_fk_token_shares_pk_label(self, movie_db):
        pk = movie_db.schema.column_id("directors", "director_id")
        fk = movie_db.schema.column_id("movies", "director_id")
        assert token_label(movie_db, pk, 3) == token_label(movie_db, fk, 3)

    def test_window_limits_pairs(self):
        pairs = skipgram_pairs([np.arange(6)], window=1)
        assert len(pairs) == 10
        assert np.all(np.abs(pairs[:, 0] - pairs[:, 1]) == 1)


class TestSkipGram:
    def test_zero_epochs_is_init(self):
        corpus = [["a", "b", "c"], ["c", "d"]]
        m0 = train_skipgram(corpus, SkipGramConfig(dim=8, epochs=0, seed=3))
        rng = np.random.default_rng(3)
        np.testing.assert_array_equal(m0.w_in, (rng.random((4, 8)) - 0.5) / 8)
        assert not m0.w_out.any()

    def test_dimension(self, movie_db):
        m = train_table2vec(movie_db, SkipGramConfig(epochs=1))
        assert m.dim == 300
        vecs = column_vectors(m, movie_db)
        assert vecs[("directors", "genre")]["Drama"].shape == (300,)

    def test_cooccurring_tokens_closer(self):
        rng = np.random.default_rng(0)
        corpus = []
        for _ in range(300):
            corpus.append(["x", "y", f"n{rng.integers(20)}"])
            corpus.append(["u", f"n{rng.integers(20)}", f"m{rng.integers(20)}"])
        m = train_skipgram(corpus, SkipGramConfig(dim=16, epochs=5, seed=0))

        def cos(a, b):
            va, vb = m.vector(a), m.vector(b)
            return va @ vb / np.linalg.norm(va) / np.linalg.norm(vb)

        assert cos("x", "y") > cos("x", "u")

    def test_deterministic(self, movie_db):
        a = train_table2vec(movie_db, SkipGramConfig(dim=8, epochs=2, seed=1))
        b = train_table2vec(movie_db, SkipGramConfig(dim=8, epochs=2, seed=1))
        np.testing.assert_array_equal(a.w_in, b.w_in)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 12), st.integers(1, 64), st.integers(0, 1000))
    def test_noise_never_hits_center_or_context(self, V, B, seed):
        rng = np.random.default_rng(seed)
        noise = rng.random(V) + 0.01
        noise /= noise.sum()
        batch = rng.integers(0, V, size=(B, 2))
        negs = sample_noise(rng, noise, batch, 5)
        assert negs.shape == (B, 5)
        assert not (negs == batch[:, :1]).any()
        assert not (negs == batch[:, 1:]).any()

    def test_noise_follows_unigram_power(self):
        rng = np.random.default_rng(0)
        noise = np.array([1.0, 2.0, 4.0, 8.0, 16.0]) ** 0.75
        noise /= noise.sum()
        forbidden = np.zeros((200_000, 1), dtype=int)  # id 0 excluded
        draws = sample_noise(rng, noise, forbidden, 1).ravel()
        freq = np.bincount(draws, minlength=5) / len(draws)
        expect = noise.copy()
        expect[0] = 0
        expect /= expect.sum()
        np.testing.assert_allclose(freq, expect, atol=5e-3)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train_skipgram([], SkipGramConfig())


class TestTripartiteGraph:
    def test_hand_counted_toy(self):
        g = build_tripartite_graph(toy_db())
        assert g.counts() == {"token_nodes": 6, "rid_nodes": 2, "cid_nodes": 3,
                              "token_rid_edges": 6, "token_cid_edges": 6}
        assert g.n_nodes == 11 and g.n_edges == 12

    def test_repeated_entity_is_one_node(self):
        g = build_tripartite_graph(toy_db((("a1", "b1", "c1"), ("a1", "b2", "c2"))))
        node = g.index["tok:t.a.3"]
        kinds = g.kinds[g.neighbors(node)]
        assert (kinds == RID).sum() == 2 and (kinds == CID).sum() == 1

    def test_no_forbidden_edges(self, movie_db):
        g = build_tripartite_graph(movie_db)
        for u, v in g.edges():
            assert TOKEN in (g.kinds[u], g.kinds[v])
            assert g.kinds[u] != g.kinds[v]

    def test_fk_and_pk_tokens_merge(self, movie_db):
        g = build_tripartite_graph(movie_db)
        pk = movie_db.schema.column_id("directors", "director_id")
        d1 = g.index[token_label(movie_db, pk, movie_db.vocab("directors", "director_id").encode("d1"))]
        rids = [g.labels[n] for n in g.neighbors(d1) if g.kinds[n] == RID]
        assert sorted(rids) == ["rid:directors.0", "rid:movies.0", "rid:movies.1", "rid:movies.2"]


class TestWalks:
    def test_counts_and_lengths(self):
        g = build_tripartite_graph(toy_db())
        walks = random_walk_corpus(g, WalkConfig(50, 20))
        assert walks.shape == (6 * 50, 20)
        walks = random_walk_corpus(g, FULL_WALKS)
        assert walks.shape == (6 * 1000, 60)

    def test_every_step_is_an_edge_and_alternates(self):
        g = build_tripartite_graph(toy_db((("a1", "b1", "c1"), ("a1", "b2", "c1"), ("a3", "b2", "c3"))))
        walks = random_walk_corpus(g, WalkConfig(20, 15, seed=4))
        edges = g.edges()
        for w in walks:
            for a, b in zip(w[:-1], w[1:]):
                assert (min(a, b), max(a, b)) in edges
            k = g.kinds[w]
            assert np.all(k[0::2] == TOKEN) and np.all(k[1::2] != TOKEN)

    def test_written_corpus(self, tmp_path):
        g = build_tripartite_graph(toy_db())
        walks = random_walk_corpus(g, WalkConfig(2, 5))
        write_walks(g, walks, tmp_path / "w.txt")
        lines = (tmp_path / "w.txt").read_text().splitlines()
        assert [l.split() for l in lines] == walks_to_sentences(g, walks)

    def test_embdi_has_token_vectors(self, movie_db):
        m = train_embdi(movie_db, WalkConfig(5, 10), SkipGramConfig(dim=8, epochs=1))
        assert all(lbl in m for lbl in table2vec_corpus(movie_db)[0])


class TestBaselineRank:
    def _model(self, vectors):
        labels = sorted(vectors)
        return SkipGramModel(labels, {l: i for i, l in enumerate(labels)},
                             np.array([vectors[l] for l in labels], dtype=float), np.zeros((len(labels), 2)),
                             np.full(len(labels), 1 / len(labels)))

    def test_aligned_candidate_first(self):
        db = toy_db((("a1", "b1", "c1"), ("a2", "b2", "c2"), ("a3", "b3", "c3")))
        a = db.schema.column_id("t", "a")
        m = self._model({"tok:t.a.3": [1, 0], "tok:t.a.4": [0, 1], "tok:t.a.5": [-1, 0], "tok:t.b.3": [0.1, 1]})
        assert baseline_rank(m, ["tok:t.b.3"], db, a) == [4, 3, 5]

    def test_identical_candidates_tie_break_by_id(self):
        db = toy_db((("a1", "b1", "c1"), ("a2", "b2", "c2"), ("a3", "b3", "c3")))
        a = db.schema.column_id("t", "a")
        m = self._model({"tok:t.a.3": [1, 1], "tok:t.a.4": [1, 1], "tok:t.a.5": [1, 1], "tok:t.b.3": [0.3, 1]})
        assert baseline_rank(m, ["tok:t.b.3"], db, a) == [3, 4, 5]

    def test_empty_context(self):
        m = self._model({"x": [1, 0]})
        with pytest.raises(EmptyContext):
            baseline_scores(m, ["nope"], ["x"])

    def test_table2vec_beats_random_on_fd(self):
        db = functional_dependency(n_rows=300, n_x=5, n_y=5, seed=0).database()
        train, test = fd_split(db)
        model = train_table2vec(db, SkipGramConfig(dim=32, epochs=10, seed=0),
                                holdout=[("fd", r.row_index) for r in test])
        zcol = db.schema.column_id("fd", "z")
        vocab = db.vocab("fd", "z")
        rr = []
        for r in test:
            s = db.sentences("fd")[r.row_index]
            ctx = [token_label(db, c, t) for t, c in s.tokens if c != zcol]
            ranked = baseline_rank(model, ctx, db, zcol)
            assert sorted(ranked) == list(range(3, len(vocab)))  # a permutation of the entities
            rr.append(1.0 / (ranked.index(vocab.encode(r.cells[2])) + 1))
        assert np.mean(rr) > random_mrr(vocab.n_entities)

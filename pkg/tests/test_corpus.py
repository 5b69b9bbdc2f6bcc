from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from reltab.corpus import (
    CLS,
    SEP,
    SPECIAL_COLUMN,
    MaskedSentence,
    SentencePair,
    apply_mask,
    largest_remainder,
    materialize_join_sentences,
    maskable_positions,
    read_corpus,
    sample_negatives,
    split_grouped,
    write_corpus,
)
from reltab.errors import InsufficientRows, NoMaskablePosition
from reltab.ingest import RowRecord, Vocabulary, database_from_rows
from reltab.synthetic import unique_join


def _fk(db):
    return db.schema.foreign_keys[0]


def _nested_loop_join(db, fk):
    """Reference join: every (pk row, fk row) pair with equal key cells."""
    ti, fi = db.schema.table(fk.to_table).index_of(fk.to_column), db.schema.table(fk.from_table).index_of(fk.from_column)
    return [(a.row_index, b.row_index) for a in db.rows[fk.to_table] for b in db.rows[fk.from_table]
            if a.cells[ti] is not None and a.cells[ti] == b.cells[fi]]


class TestMaterializeJoin:
    def test_unique_key_gives_one_pair_per_row(self):
        db = unique_join(n_keys=100).database()
        fk = _fk(db)
        pairs = materialize_join_sentences(fk, db.rows["parent"], db.rows["child"], db)
        assert len(pairs) == 100
        assert all(p.label == 1 and p.join_key[0] == p.join_key[1] for p in pairs)

    def test_one_to_many_matches_oracle(self, movie_db):
        fk = _fk(movie_db)
        pairs = materialize_join_sentences(fk, movie_db.rows["directors"], movie_db.rows["movies"], movie_db)
        got = [(p.first.source[1], p.second.source[1]) for p in pairs]
        assert got == _nested_loop_join(movie_db, fk)
        nolan = [p for p in pairs if p.first.source[1] == 0]
        assert len(nolan) == 3
        assert all(p.first is nolan[0].first for p in nolan)

    def test_dangling_and_null_keys(self, movie_schema):
        db = database_from_rows(movie_schema, {
            "directors": [("d1", "A", "g")],
            "movies": [("m1", "T", "1", "d1"), ("m2", "U", "2", "d9"), ("m3", "V", "3", None)],
        })
        pairs = materialize_join_sentences(_fk(db), db.rows["movies"], db.rows["directors"], db)
        assert [p.first.source[1] for p in pairs] == [0]
        assert pairs[0].key_columns == (db.schema.column_id("movies", "director_id"),
                                        db.schema.column_id("directors", "director_id"))

    def test_empty_side(self, movie_db):
        assert materialize_join_sentences(_fk(movie_db), [], movie_db.rows["movies"], movie_db) == []


class TestSampleNegatives:
    def setup_method(self):
        self.db = unique_join(n_keys=20).database()
        fk = _fk(self.db)
        self.pairs = materialize_join_sentences(fk, self.db.rows["parent"], self.db.rows["child"], self.db)
        self.pool = self.db.sentences("child")

    def test_k_negatives_per_positive(self, rng):
        out = sample_negatives(self.pairs, 10, rng, self.pool)
        assert len(out) == 11 * len(self.pairs)
        for i in range(0, len(out), 11):
            pos, negs = out[i], out[i + 1: i + 11]
            assert pos.label == 1 and all(n.label == 0 for n in negs)
            assert all(n.first is pos.first for n in negs)
            assert all(n.join_key[1] != pos.join_key[1] for n in negs)

    def test_two_rows_forces_the_other(self, rng):
        db = unique_join(n_keys=2).database()
        pairs = materialize_join_sentences(_fk(db), db.rows["parent"], db.rows["child"], db)
        pool = db.sentences("child")
        out = sample_negatives(pairs, 1, rng, pool)
        for pos, neg in zip(out[::2], out[1::2]):
            assert neg.second.source != pos.second.source
            assert neg.join_key[1] != pos.join_key[1]

    def test_single_key_pool_raises(self, rng):
        db = unique_join(n_keys=1).database()
        pairs = materialize_join_sentences(_fk(db), db.rows["parent"], db.rows["child"], db)
        with pytest.raises(InsufficientRows):
            sample_negatives(pairs, 1, rng, db.sentences("child"))

    def test_bad_k(self, rng):
        with pytest.raises(ValueError):
            sample_negatives(self.pairs, 0, rng, self.pool)

    def test_uniform_over_eligible_rows(self):
        rng = np.random.default_rng(0)
        pos = self.pairs[:1]
        out = sample_negatives(pos, 100_000, rng, self.pool)
        counts = Counter(p.second.source[1] for p in out[1:])
        true_row = pos[0].second.source[1]
        assert true_row not in counts
        assert len(counts) == 19
        obs = np.array([counts[i] for i in sorted(counts)])
        # chi-square goodness of fit against the uniform distribution
        assert stats.chisquare(obs).pvalue > 1e-3
        z = (obs - obs.mean()) / np.sqrt(100_000 * (1 / 19) * (18 / 19))
        assert np.all(np.abs(z) < 3.5)


class TestMasking:
    def test_position_uniform_over_five(self, movie_db):
        from reltab.ingest import RowRecord as R, build_vocabularies, encode_row
        from test_ingest import CAST_SCHEMA

        row = R("cast", ("Matt Damon", "Christopher Nolan", "Interstellar", "Mann", "2014"), 0)
        s = encode_row(row, build_vocabularies(CAST_SCHEMA, {"cast": [row]}), CAST_SCHEMA)
        rng = np.random.default_rng(3)
        pos = [apply_mask(s, rng).mask_position for _ in range(5000)]
        counts = np.bincount(pos, minlength=5)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_restricted_column_always_chosen(self, movie_db, rng):
        col = movie_db.schema.column_id("movies", "director_id")
        for s in movie_db.sentences("movies"):
            m = apply_mask(s, rng, {col})
            assert m.mask_position == 3
            assert m.target == (col, s.tokens[3][0])

    def test_other_tokens_untouched(self, movie_db, rng):
        s = movie_db.sentences("movies")[0]
        m = apply_mask(s, rng)
        assert isinstance(m, MaskedSentence)
        assert m.base.tokens[m.mask_position][0] == Vocabulary.MASK
        others = [i for i in range(len(s)) if i != m.mask_position]
        assert len(others) == 3
        assert [m.base.tokens[i] for i in others] == [s.tokens[i] for i in others]
        assert m.restore() == s

    def test_specials_not_maskable(self, movie_db, rng):
        pair = materialize_join_sentences(_fk(movie_db), movie_db.rows["directors"], movie_db.rows["movies"],
                                          movie_db)[0]
        flat = pair.as_sentence()
        assert flat.tokens[0] == (CLS, SPECIAL_COLUMN) and flat.tokens[-1] == (SEP, SPECIAL_COLUMN)
        assert all(flat.tokens[i][1] != SPECIAL_COLUMN for i in maskable_positions(flat))
        row = RowRecord("movies", (None, None, None, None), 0)
        from reltab.ingest import encode_row

        with pytest.raises(NoMaskablePosition):
            apply_mask(encode_row(row, movie_db.vocabs, movie_db.schema), rng)


class TestSplit:
    def _rows(self, groups):
        out, i = [], 0
        for g, n in groups.items():
            for _ in range(n):
                out.append(RowRecord("t", (g,), i))
                i += 1
        return out

    def test_twenty_rows_gives_14_3_3(self, rng):
        sp = split_grouped(self._rows({"d": 20}), 0, rng=rng)
        assert (len(sp.train), len(sp.valid), len(sp.test)) == (14, 3, 3)

    def test_single_row_group_goes_to_train(self, rng):
        sp = split_grouped(self._rows({"d": 1}), 0, rng=rng)
        assert (len(sp.train), len(sp.valid), len(sp.test)) == (1, 0, 0)

    def test_largest_remainder_oracle(self):
        for n in range(0, 60):
            counts = largest_remainder(n, (0.7, 0.15, 0.15))
            assert sum(counts) == n
            quotas = np.array([0.7, 0.15, 0.15]) * n
            assert np.all(np.abs(np.array(counts) - quotas) < 1)

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.sampled_from("abcdefg"), st.integers(1, 30), min_size=1), st.integers(0, 10_000))
    def test_partition(self, groups, seed):
        rows = self._rows(groups)
        sp = split_grouped(rows, 0, rng=np.random.default_rng(seed))
        parts = [set(sp.train), set(sp.valid), set(sp.test)]
        assert set().union(*parts) == {r.row_index for r in rows}
        assert sum(len(p) for p in parts) == len(rows)

    def test_deterministic(self):
        rows = self._rows({"a": 9, "b": 13})
        a = split_grouped(rows, 0, rng=np.random.default_rng(5))
        b = split_grouped(rows, 0, rng=np.random.default_rng(5))
        assert (a.train, a.valid, a.test) == (b.train, b.valid, b.test)

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_grouped([], 0, (0.5, 0.5, 0.5))


class TestCorpusIO:
    def test_round_trip(self, movie_db, rng, tmp_path):
        fk = _fk(movie_db)
        pairs = materialize_join_sentences(fk, movie_db.rows["directors"], movie_db.rows["movies"], movie_db)
        nsp = sample_negatives(pairs, 2, rng, movie_db.sentences("movies"))
        mlm = [apply_mask(s, rng) for s in movie_db.sentences("movies")]
        n = write_corpus(mlm + nsp, tmp_path / "c.jsonl")
        assert n == len(mlm) + len(nsp)
        back = read_corpus(tmp_path / "c.jsonl")
        for a, b in zip(mlm, back[: len(mlm)]):
            assert (a.base.tokens, a.target, a.mask_position) == (b.base.tokens, b.target, b.mask_position)
        for a, b in zip(nsp, back[len(mlm):]):
            assert isinstance(b, SentencePair)
            assert a.as_sentence().tokens == b.as_sentence().tokens and a.label == b.label

    def test_bad_line(self, tmp_path):
        from reltab.errors import ParseError

        (tmp_path / "c.jsonl").write_text('{"kind": "nsp", "tokens": [[1, 0]], "label": 1}\n')
        with pytest.raises(ParseError):
            read_corpus(tmp_path / "c.jsonl")

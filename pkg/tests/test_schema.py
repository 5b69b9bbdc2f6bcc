import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reltab.errors import ParseError, SchemaError
from reltab.ingest import RowRecord
from reltab.schema import (
    build_schema,
    dump_schema,
    join_compatible_pairs,
    load_schema,
    validate_data_against_schema,
)
from reltab.synthetic import reference_schema

from conftest import MOVIE_SCHEMA


class TestLoadSchema:
    def test_reference_imdb_shape(self):
        schema = reference_schema("imdb")
        assert len(schema.tables) == 7
        assert schema.n_columns == 21

    def test_single_table_no_fks(self):
        schema = build_schema({"tables": [{"name": "t", "columns": [{"name": "a"}]}]})
        assert schema.foreign_keys == ()
        assert join_compatible_pairs(schema) == []

    def test_fk_to_non_pk_rejected(self):
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["foreign_keys"][0]["to_column"] = "name"
        with pytest.raises(SchemaError):
            build_schema(spec)

    def test_dangling_fk_rejected(self):
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["foreign_keys"][0]["to_table"] = "studios"
        with pytest.raises(SchemaError):
            build_schema(spec)

    def test_duplicate_names_rejected(self):
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["tables"][0]["columns"].append({"name": "genre"})
        with pytest.raises(SchemaError):
            build_schema(spec)
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["tables"].append(copy.deepcopy(spec["tables"][0]))
        with pytest.raises(SchemaError):
            build_schema(spec)

    def test_composite_key_rejected(self):
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["foreign_keys"][0]["from_column"] = ["director_id", "title"]
        with pytest.raises(SchemaError):
            build_schema(spec)

    def test_two_primary_keys_rejected(self):
        spec = copy.deepcopy(MOVIE_SCHEMA)
        spec["tables"][0]["columns"][1]["role"] = "primary_key"
        with pytest.raises(SchemaError):
            build_schema(spec)

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text("{not json")
        with pytest.raises(ParseError):
            load_schema(p)
        p.write_text(json.dumps({"tables": [{"columns": []}]}))
        with pytest.raises(ParseError):
            load_schema(p)

    def test_round_trip(self, movie_schema, tmp_path):
        dump_schema(movie_schema, tmp_path / "s.json")
        again = load_schema(tmp_path / "s.json")
        assert again == movie_schema
        assert again.schema_hash() == movie_schema.schema_hash()


class TestColumnIdentity:
    def test_global_ids_and_key_spaces(self, movie_schema):
        s = movie_schema
        pk = s.column_id("directors", "director_id")
        fk = s.column_id("movies", "director_id")
        assert pk != fk
        assert s.key_space(fk) == pk
        assert s.key_space(s.column_id("movies", "title")) == s.column_id("movies", "title")
        assert s.key_column_ids() == {pk, fk, s.column_id("movies", "movie_id")}
        assert [s.column_by_id(i).qualname for i in range(s.n_columns)][:3] == [
            "directors.director_id", "directors.name", "directors.genre"]

    def test_connectivity(self, movie_schema):
        assert movie_schema.is_connected()
        two = build_schema({"tables": [{"name": "a", "columns": [{"name": "x"}]},
                                       {"name": "b", "columns": [{"name": "y"}]}]})
        assert not two.is_connected()


class TestJoinCompatiblePairs:
    def test_reference_mimic_has_twelve_joins(self):
        assert len(join_compatible_pairs(reference_schema("mimic"))) == 12

    def test_two_fks_from_one_table_are_ordered(self):
        schema = reference_schema("imdb")
        pairs = join_compatible_pairs(schema)
        assert set(pairs) == set(schema.foreign_keys)
        keys = [(p.from_table, p.from_column) for p in pairs]
        assert keys == sorted(keys)
        md = [p for p in pairs if p.from_table == "movies_directors"]
        assert [p.from_column for p in md] == ["director_id", "movie_id"]


def _rows(table, cells):
    return [RowRecord(table, tuple(c), i) for i, c in enumerate(cells)]


def _nested_loop_issues(schema, tables):
    """Reference referential check by exhaustive scanning."""
    issues = set()
    for t in schema.tables:
        pk = t.primary_key
        if pk is None:
            continue
        i = t.index_of(pk.name)
        rows = tables[t.name]
        for a in rows:
            dup = [b.row_index for b in rows if b.cells[i] == a.cells[i] and a.cells[i] is not None]
            if len(dup) > 1:
                issues.add(("duplicate_pk", t.name, a.cells[i], tuple(dup)))
    for fk in schema.foreign_keys:
        i = schema.table(fk.from_table).index_of(fk.from_column)
        j = schema.table(fk.to_table).index_of(fk.to_column)
        for r in tables[fk.from_table]:
            v = r.cells[i]
            if v is not None and not any(p.cells[j] == v for p in tables[fk.to_table]):
                issues.add(("dangling_fk", fk.from_table, v, (r.row_index,)))
    return issues


class TestValidation:
    def test_consistent_db_is_clean(self, movie_db):
        assert len(validate_data_against_schema(movie_db.schema, movie_db.rows)) == 0

    def test_one_dangling_fk(self, movie_schema):
        tables = {
            "directors": _rows("directors", [("d1", "A", "x")]),
            "movies": _rows("movies", [("m1", "T", "2000", "d1"), ("m2", "U", "2001", "d9")]),
        }
        rep = validate_data_against_schema(movie_schema, tables)
        assert len(rep) == 1
        issue = rep.issues[0]
        assert (issue.kind, issue.table, issue.column, issue.value, issue.rows) == (
            "dangling_fk", "movies", "director_id", "d9", (1,))

    def test_duplicate_pk_lists_rows(self, movie_schema):
        tables = {
            "directors": _rows("directors", [("d1", "A", "x"), ("d2", "B", "y"), ("d1", "C", "z")]),
            "movies": [],
        }
        rep = validate_data_against_schema(movie_schema, tables)
        assert [(i.kind, i.value, i.rows) for i in rep.issues] == [("duplicate_pk", "d1", (0, 2))]

    def test_does_not_mutate(self, movie_db):
        before = {t: list(r) for t, r in movie_db.rows.items()}
        validate_data_against_schema(movie_db.schema, movie_db.rows)
        assert before == movie_db.rows

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.sampled_from(["d1", "d2", "d3", None]), min_size=0, max_size=5),
        st.lists(st.sampled_from(["d1", "d2", "d4", "d5", None]), min_size=0, max_size=8),
    )
    def test_matches_nested_loop_oracle(self, pks, fks):
        from conftest import MOVIE_SCHEMA as spec

        schema = build_schema(spec)
        tables = {
            "directors": _rows("directors", [(p, "n", "g") for p in pks]),
            "movies": _rows("movies", [(f"m{i}", "t", "y", f) for i, f in enumerate(fks)]),
        }
        rep = validate_data_against_schema(schema, tables)
        got = {(i.kind, i.table, i.value, i.rows) for i in rep.issues}
        assert got == _nested_loop_issues(schema, tables)
        assert (len(rep) == 0) == (len(_nested_loop_issues(schema, tables)) == 0)

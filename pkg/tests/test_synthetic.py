from collections import Counter, defaultdict

import numpy as np

from reltab.ingest import load_database
from reltab.schema import load_schema, validate_data_against_schema
from reltab.selftest import CheckResult, check_metric_oracle, tiny_encoder_setup
from reltab.synthetic import bundled_path, fd_split, functional_dependency, mini_imdb, unique_join


class TestFunctionalDependency:
    def test_z_is_a_bijection_of_xy(self):
        ds = functional_dependency(n_rows=500, n_x=10, n_y=10, seed=3)
        rows = ds.rows["fd"]
        assert len(rows) == 500
        z_of = defaultdict(set)
        xy_of = defaultdict(set)
        for x, y, z in rows:
            z_of[(x, y)].add(z)
            xy_of[z].add((x, y))
        assert len(z_of) == 100 and all(len(v) == 1 for v in z_of.values())
        assert all(len(v) == 1 for v in xy_of.values())
        assert set(Counter(z for _, _, z in rows).values()) == {5}

    def test_split_holds_one_row_per_value(self):
        db = functional_dependency().database()
        train, test = fd_split(db, seed=1)
        assert len(test) == 100 and len(train) == 400
        assert len({r.cells[2] for r in test}) == 100
        assert not {r.row_index for r in train} & {r.row_index for r in test}


class TestUniqueJoin:
    def test_one_to_one(self):
        ds = unique_join(n_keys=50)
        parents = [p for p, _ in ds.rows["parent"]]
        children = [c[1] for c in ds.rows["child"]]
        assert sorted(parents) == sorted(children) and len(set(children)) == 50
        db = ds.database()
        assert len(validate_data_against_schema(db.schema, db.rows)) == 0


class TestMiniImdb:
    def test_bundled_files_match_generator(self):
        path = bundled_path("mini_imdb")
        schema = load_schema(path / "schema.json")
        db = load_database(schema, path)
        ds = mini_imdb()
        assert schema == ds.schema
        for t in schema.tables:
            assert [r.cells for r in db.rows[t.name]] == [tuple(c) for c in ds.rows[t.name]]

    def test_shape_and_integrity(self):
        db = mini_imdb().database()
        assert len(db.schema.tables) == 5 and len(db.schema.foreign_keys) == 4
        assert db.n_rows() <= 20_000
        assert len(validate_data_against_schema(db.schema, db.rows)) == 0
        assert db.vocab("directors", "director_id").n_entities == 60

    def test_director_predictable_from_genre(self):
        ds = mini_imdb()
        d_genre = {d[0]: d[3] for d in ds.rows["directors"]}
        m_dir = {m[0]: m[3] for m in ds.rows["movies"]}
        agree = np.mean([d_genre[m_dir[mid]] == g for mid, g in ds.rows["movies_genres"]])
        assert agree > 0.5


class TestSelftest:
    def test_tiny_setup_is_f64(self):
        db, model = tiny_encoder_setup()
        assert all(p.dtype == np.float64 for p in model.parameters())
        assert len(model.layers) == 2 and model.config.d_model == 8 and model.config.n_heads == 2

    def test_metric_checks_pass(self):
        res = check_metric_oracle(n_instances=200)
        assert all(isinstance(r, CheckResult) and r.passed for r in res)
        assert res[0].line().startswith("PASS")

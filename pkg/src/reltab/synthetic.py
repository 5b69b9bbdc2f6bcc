"""Seeded synthetic databases used by tests, demos and the acceptance suite,
plus reference schemas with the shape of the IMDB and MIMIC subsets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .ingest import Database, RowRecord, database_from_rows, write_table_csv
from .schema import DatabaseSchema, build_schema, dump_schema


@dataclass
class SyntheticDataset:
    schema: DatabaseSchema
    rows: dict  # table -> list of cell tuples
    target: str | None = None  # "table.column" for autocompletion
    join: str | None = None  # "from_table.from_column" for join prediction

    def database(self, share_key_spaces: bool = True) -> Database:
        return database_from_rows(self.schema, self.rows, share_key_spaces)

    def write(self, out_dir) -> Path:
        """schema.json plus one CSV per table."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_schema(self.schema, out_dir / "schema.json")
        for t in self.schema.tables:
            recs = [RowRecord(t.name, tuple(r), i) for i, r in enumerate(self.rows[t.name])]
            write_table_csv(self.schema, t.name, recs, out_dir / f"{t.name}.csv")
        return out_dir


def _cols(*specs):
    out = []
    for s in specs:
        name, _, role = s.partition(":")
        role = {"pk": "primary_key", "fk": "foreign_key", "": "attribute"}[role]
        out.append({"name": name, "role": role, "dtype_hint": "categorical"})
    return out


def functional_dependency(n_rows: int = 500, n_x: int = 10, n_y: int = 10, seed: int = 0) -> SyntheticDataset:
    """One table (x, y, z) where z is a bijective function of (x, y).

    Rows cycle through all n_x * n_y combinations so every combination is
    repeated ``n_rows / (n_x * n_y)`` times; the z labels are a seeded
    permutation so that z carries no lexical hint of (x, y).
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_x * n_y)
    schema = build_schema({"tables": [{"name": "fd", "columns": _cols("x", "y", "z")}]})
    rows = []
    order = rng.permutation(n_rows)
    for i in order:
        combo = i % (n_x * n_y)
        x, y = divmod(combo, n_y)
        rows.append((f"x{x}", f"y{y}", f"z{perm[combo]:03d}"))
    return SyntheticDataset(schema, {"fd": rows}, target="fd.z")


def fd_split(db: Database, test_per_value: int = 1, seed: int = 0):
    """Hold out ``test_per_value`` rows of every z value; returns (train rows, test rows)."""
    rng = np.random.default_rng(seed)
    by_z: dict = {}
    for r in db.rows["fd"]:
        by_z.setdefault(r.cells[2], []).append(r)
    train, test = [], []
    for z in sorted(by_z):
        rs = list(by_z[z])
        idx = rng.permutation(len(rs))
        test.extend(rs[i] for i in idx[:test_per_value])
        train.extend(rs[i] for i in idx[test_per_value:])
    key = lambda r: r.row_index  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


def unique_join(n_keys: int = 100, n_attr: int = 10, seed: int = 0) -> SyntheticDataset:
    """Two tables linked one-to-one: child.pid references parent.pid.

    Attributes are independent noise, so matching rows can only be found
    through the key itself.
    """
    rng = np.random.default_rng(seed)
    schema = build_schema({
        "tables": [
            {"name": "parent", "columns": _cols("pid:pk", "pa")},
            {"name": "child", "columns": _cols("cid:pk", "pid:fk", "ca")},
        ],
        "foreign_keys": [
            {"from_table": "child", "from_column": "pid", "to_table": "parent", "to_column": "pid"}
        ],
    })
    keys = [f"p{i:03d}" for i in range(n_keys)]
    parent = [(k, f"a{rng.integers(n_attr)}") for k in keys]
    order = rng.permutation(n_keys)
    child = [(f"c{j:03d}", keys[i], f"b{rng.integers(n_attr)}") for j, i in enumerate(order)]
    return SyntheticDataset(schema, {"parent": parent, "child": child}, join="child.pid")


MINI_IMDB_SCHEMA = {
    "tables": [
        {"name": "directors", "columns": _cols("director_id:pk", "first_name", "last_name", "genre")},
        {"name": "movies", "columns": _cols("movie_id:pk", "year", "rank", "director_id:fk")},
        {"name": "actors", "columns": _cols("actor_id:pk", "first_name", "last_name", "gender")},
        {"name": "roles", "columns": _cols("actor_id:fk", "movie_id:fk", "role")},
        {"name": "movies_genres", "columns": _cols("movie_id:fk", "genre")},
    ],
    "foreign_keys": [
        {"from_table": "movies", "from_column": "director_id", "to_table": "directors", "to_column": "director_id"},
        {"from_table": "roles", "from_column": "actor_id", "to_table": "actors", "to_column": "actor_id"},
        {"from_table": "roles", "from_column": "movie_id", "to_table": "movies", "to_column": "movie_id"},
        {"from_table": "movies_genres", "from_column": "movie_id", "to_table": "movies", "to_column": "movie_id"},
    ],
}

GENRES = ("Drama", "Comedy", "Action", "Horror", "Thriller", "Romance", "Sci-Fi", "Documentary")
FIRST = ("Ada", "Ben", "Cleo", "Dev", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jun", "Kai", "Lea",
         "Max", "Nia", "Oto", "Pia", "Rex", "Sia", "Tom", "Uma")
LAST = ("Abe", "Boyd", "Cruz", "Dahl", "Egan", "Ford", "Gray", "Hale", "Ives", "Jung", "Kerr",
        "Lund", "Moss", "Nash", "Ortiz", "Park", "Quinn", "Reed", "Sato", "Toft")
ROLES = ("lead", "support", "cameo", "villain", "narrator")


def mini_imdb(n_directors: int = 60, n_movies: int = 600, n_actors: int = 240, roles_per_movie: int = 3,
              seed: int = 0) -> SyntheticDataset:
    """Five-table movie database with learnable structure.

    Each director has a favourite genre, an active decade and a troupe of
    regular actors; their movies mostly follow those preferences, so the
    director of a movie is predictable from the movie row and its join
    partners.
    """
    rng = np.random.default_rng(seed)
    schema = build_schema(MINI_IMDB_SCHEMA)
    directors, movies, actors, roles, mg = [], [], [], [], []
    d_genre, d_decade, d_troupe = [], [], []
    for a in range(n_actors):
        actors.append((f"a{a:04d}", FIRST[rng.integers(len(FIRST))], LAST[rng.integers(len(LAST))],
                       ("f", "m")[rng.integers(2)]))
    for d in range(n_directors):
        g = int(rng.integers(len(GENRES)))
        d_genre.append(g)
        d_decade.append(int(rng.integers(1950, 2010) // 10 * 10))
        d_troupe.append(rng.choice(n_actors, size=6, replace=False))
        directors.append((f"d{d:03d}", FIRST[rng.integers(len(FIRST))], LAST[rng.integers(len(LAST))], GENRES[g]))
    for m in range(n_movies):
        d = m % n_directors if m < n_directors else int(rng.integers(n_directors))
        mid = f"m{m:04d}"
        year = d_decade[d] + int(rng.integers(10))
        movies.append((mid, str(year), f"r{rng.integers(1, 6)}", f"d{d:03d}"))
        genres = {d_genre[d] if rng.random() < 0.8 else int(rng.integers(len(GENRES)))}
        if rng.random() < 0.5:
            genres.add(int(rng.integers(len(GENRES))))
        for g in sorted(genres):
            mg.append((mid, GENRES[g]))
        cast = set()
        while len(cast) < roles_per_movie:
            pool = d_troupe[d] if rng.random() < 0.7 else np.arange(n_actors)
            cast.add(int(pool[rng.integers(len(pool))]))
        for a in sorted(cast):
            roles.append((f"a{a:04d}", mid, ROLES[rng.integers(len(ROLES))]))
    rows = {"directors": directors, "movies": movies, "actors": actors, "roles": roles, "movies_genres": mg}
    return SyntheticDataset(schema, rows, target="movies.director_id", join="movies.director_id")


def bundled_path(name: str = "mini_imdb") -> Path:
    """Directory of a dataset shipped with the package (schema.json + CSVs)."""
    return Path(str(resources.files("reltab") / "data" / name))


def reference_schema(name: str) -> DatabaseSchema:
    """Schemas shaped like the IMDB (7 tables) and MIMIC (12 joins) subsets."""
    path = resources.files("reltab") / "data" / f"{name}_schema.json"
    return build_schema(json.loads(path.read_text(encoding="utf-8")))


DATASETS = {
    "fd": functional_dependency,
    "join": unique_join,
    "mini_imdb": mini_imdb,
}

import numpy as np
import pytest

from reltab.ingest import database_from_rows
from reltab.schema import build_schema

MOVIE_SCHEMA = {
    "tables": [
        {"name": "directors", "columns": [
            {"name": "director_id", "role": "primary_key", "dtype_hint": "categorical"},
            {"name": "name", "role": "attribute", "dtype_hint": "text"},
            {"name": "genre", "role": "attribute", "dtype_hint": "categorical"},
        ]},
        {"name": "movies", "columns": [
            {"name": "movie_id", "role": "primary_key", "dtype_hint": "categorical"},
            {"name": "title", "role": "attribute", "dtype_hint": "text"},
            {"name": "year", "role": "attribute", "dtype_hint": "numeric"},
            {"name": "director_id", "role": "foreign_key", "dtype_hint": "categorical"},
        ]},
    ],
    "foreign_keys": [
        {"from_table": "movies", "from_column": "director_id",
         "to_table": "directors", "to_column": "director_id"},
    ],
}

MOVIE_ROWS = {
    "directors": [
        ("d1", "Christopher Nolan", "SciFi"),
        ("d2", "Clint Eastwood", "Western"),
        ("d3", "Greta Gerwig", "Drama"),
    ],
    "movies": [
        ("m1", "Interstellar", "2014", "d1"),
        ("m2", "Inception", "2010", "d1"),
        ("m3", "Dunkirk", "2017", "d1"),
        ("m4", "Unforgiven", "1992", "d2"),
        ("m5", "Lady Bird", "2017", "d3"),
        ("m6", "Little Women", "2019", "d3"),
    ],
}


@pytest.fixture
def movie_schema():
    return build_schema(MOVIE_SCHEMA)


@pytest.fixture
def movie_db(movie_schema):
    return database_from_rows(movie_schema, MOVIE_ROWS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

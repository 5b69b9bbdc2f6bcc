"""CSV ingestion, cleaning rules and per-column vocabularies."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, SchemaError
from .schema import DatabaseSchema

NULL = None
"""Sentinel stored in ``RowRecord.cells`` for empty CSV cells."""

MAX_BINS = 128


@dataclass(frozen=True)
class RowRecord:
    table: str
    cells: tuple
    row_index: int


def load_table_csv(schema: DatabaseSchema, table: str, path) -> list[RowRecord]:
    """Read one table; cells come back in schema column order."""
    tdef = schema.table(table)
    expected = tdef.column_names
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header row") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        if sorted(header) != sorted(expected) or len(set(header)) != len(header):
            raise ParseError(
                f"{path}: header {header} does not match columns {expected} of {table!r}"
            )
        order = [header.index(name) for name in expected]
        rows = []
        try:
            for i, raw in enumerate(reader):
                if len(raw) != len(header):
                    raise ParseError(
                        f"{path}: data row {i} has {len(raw)} cells, expected {len(header)}"
                    )
                cells = tuple(raw[j] if raw[j] != "" else NULL for j in order)
                rows.append(RowRecord(table, cells, i))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return rows


def write_table_csv(schema: DatabaseSchema, table: str, rows: Iterable[RowRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.table(table).column_names)
        for r in rows:
            writer.writerow(["" if c is NULL else c for c in r.cells])


@dataclass(frozen=True)
class CleaningRule:
    """Row filter applied before vocabularies are built.

    kind is one of ``min_entity_frequency`` (drop rows whose ``column`` value
    occurs in fewer than ``threshold`` rows), ``drop_value`` (drop rows whose
    ``column`` equals ``value``) or ``max_group_size`` (drop every row of a
    ``column`` group with more than ``threshold`` rows).
    """

    kind: str
    table: str
    column: str
    threshold: int = 0
    value: str | None = None

    def __post_init__(self):
        if self.kind not in ("min_entity_frequency", "drop_value", "max_group_size"):
            raise ValueError(f"unknown cleaning rule kind {self.kind!r}")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CleaningRule":
        return cls(d["kind"], d["table"], d["column"], int(d.get("threshold", 0)), d.get("value"))


def apply_cleaning_rules(
    rows: Sequence[RowRecord], rules: Sequence[CleaningRule], schema: DatabaseSchema | None = None
) -> list[RowRecord]:
    """Drop rows flagged by any rule; input order is preserved.

    Frequencies and group sizes are counted once on the rows passed in (no
    fixpoint iteration), so the result does not depend on rule order.
    """
    drop: set[int] = set()
    by_table = defaultdict(list)
    for pos, r in enumerate(rows):
        by_table[r.table].append(pos)
    for rule in rules:
        positions = by_table.get(rule.table, [])
        if not positions:
            continue
        if schema is not None:
            col = schema.table(rule.table).index_of(rule.column)
        else:
            col = _column_index_from_rule(rule)
        if rule.kind == "drop_value":
            drop.update(p for p in positions if rows[p].cells[col] == rule.value)
            continue
        counts = Counter(rows[p].cells[col] for p in positions)
        if rule.kind == "min_entity_frequency":
            drop.update(
                p
                for p in positions
                if rows[p].cells[col] is not NULL and counts[rows[p].cells[col]] < rule.threshold
            )
        else:
            drop.update(
                p
                for p in positions
                if rows[p].cells[col] is not NULL and counts[rows[p].cells[col]] > rule.threshold
            )
    return [r for pos, r in enumerate(rows) if pos not in drop]


def _column_index_from_rule(rule: CleaningRule) -> int:
    if isinstance(rule.column, int):
        return rule.column
    raise SchemaError("a schema is required to resolve column names in cleaning rules")


def bin_numeric_columns(
    schema: DatabaseSchema, rows: Mapping[str, list[RowRecord]], n_bins: int
) -> dict[str, list[RowRecord]]:
    """Equal-width binning of ``numeric``-hinted attribute columns.

    Bucket labels look like ``bin03[1990,2000)``. Cells that do not parse as
    numbers are left untouched.
    """
    if not 1 <= n_bins <= MAX_BINS:
        raise ValueError(f"n_bins must be in [1, {MAX_BINS}]")
    out = {}
    for t in schema.tables:
        trows = rows.get(t.name, [])
        numeric = [
            i for i, c in enumerate(t.columns) if c.dtype_hint == "numeric" and c.role == "attribute"
        ]
        edges = {}
        for i in numeric:
            vals = [_as_float(r.cells[i]) for r in trows]
            vals = [v for v in vals if v is not None]
            if vals:
                edges[i] = (min(vals), max(vals))
        new_rows = []
        for r in trows:
            cells = list(r.cells)
            for i, (lo, hi) in edges.items():
                v = _as_float(cells[i])
                if v is None:
                    continue
                width = (hi - lo) / n_bins
                b = 0 if width == 0 else min(int((v - lo) / width), n_bins - 1)
                a = lo + b * width
                cells[i] = f"bin{b:02d}[{a:g},{a + width:g})"
            new_rows.append(RowRecord(r.table, tuple(cells), r.row_index))
        out[t.name] = new_rows
    return out


def _as_float(cell):
    if cell is NULL:
        return None
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


class Vocabulary:
    """Bijection between the cell strings of one column space and token ids.

    Ids 0, 1, 2 are ``[PAD]``, ``[MASK]`` and ``[UNK]``; entities follow,
    ordered by descending frequency then string.
    """

    SPECIALS = ("[PAD]", "[MASK]", "[UNK]")
    PAD, MASK, UNK = 0, 1, 2
    N_SPECIAL = 3

    def __init__(self, column: tuple[str, str], entities: Sequence[str]):
        self.column = tuple(column)
        self._itos = list(self.SPECIALS) + list(entities)
        self._stoi = {s: i for i, s in enumerate(entities, start=self.N_SPECIAL)}
        if len(self._stoi) != len(entities):
            raise ValueError("vocabulary entities must be distinct")

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, s) -> bool:
        return s in self._stoi

    def __repr__(self) -> str:
        return f"Vocabulary({'.'.join(self.column)}, {self.n_entities} entities)"

    @property
    def n_entities(self) -> int:
        return len(self._itos) - self.N_SPECIAL

    @property
    def entities(self) -> list[str]:
        return self._itos[self.N_SPECIAL:]

    def encode(self, s) -> int:
        if s is NULL:
            return self.UNK
        return self._stoi.get(s, self.UNK)

    def decode(self, token_id: int) -> str:
        return self._itos[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id < self.N_SPECIAL

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.column).encode())
        for s in self._itos:
            h.update(b"\x1e" + s.encode("utf-8"))
        return h.hexdigest()


def build_vocabularies(
    schema: DatabaseSchema, rows: Mapping[str, Sequence[RowRecord]], share_key_spaces: bool = True
) -> dict[tuple[str, str], Vocabulary]:
    """One vocabulary per (table, column).

    With ``share_key_spaces`` a foreign-key column maps to the very same
    Vocabulary object as the primary key it references.
    """
    space_of = {}
    for t in schema.tables:
        for c in t.columns:
            cid = schema.column_id(t.name, c.name)
            space_of[(t.name, c.name)] = schema.key_space(cid) if share_key_spaces else cid
    counts: dict[int, Counter] = defaultdict(Counter)
    for t in schema.tables:
        for r in rows.get(t.name, []):
            for c, cell in zip(t.columns, r.cells):
                if cell is not NULL:
                    counts[space_of[(t.name, c.name)]][cell] += 1
    by_space = {}
    for space in sorted(set(space_of.values())):
        col = schema.column_by_id(space)
        ordered = sorted(counts[space].items(), key=lambda kv: (-kv[1], kv[0]))
        by_space[space] = Vocabulary((col.table, col.name), [s for s, _ in ordered])
    return {key: by_space[space] for key, space in space_of.items()}


def encode_row(record: RowRecord, vocabs: Mapping[tuple[str, str], Vocabulary], schema: DatabaseSchema):
    from .corpus import Sentence

    tdef = schema.table(record.table)
    if len(record.cells) != tdef.n_columns:
        raise ParseError(
            f"row {record.row_index} of {record.table!r} has {len(record.cells)} cells, "
            f"expected {tdef.n_columns}"
        )
    tokens = tuple(
        (vocabs[(record.table, c.name)].encode(cell), schema.column_id(record.table, c.name))
        for c, cell in zip(tdef.columns, record.cells)
    )
    return Sentence(tokens, (record.table, record.row_index))


def decode_sentence(sentence, vocabs, schema: DatabaseSchema) -> list[str]:
    out = []
    for tok, col in sentence.tokens:
        c = schema.column_by_id(col)
        out.append(vocabs[(c.table, c.name)].decode(tok))
    return out


def dump_vocabularies(vocabs: Mapping[tuple[str, str], Vocabulary], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for (table, column), v in vocabs.items():
            for i in range(len(v)):
                rec = {"table": table, "column": column, "token": v.decode(i), "id": i}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_vocabularies(path, schema: DatabaseSchema) -> dict[tuple[str, str], Vocabulary]:
    entries: dict[tuple[str, str], dict[int, str]] = defaultdict(dict)
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries[(rec["table"], rec["column"])][int(rec["id"])] = rec["token"]
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(f"{path}: bad vocabulary line {lineno}") from exc
    built: dict[tuple, Vocabulary] = {}
    out = {}
    for t in schema.tables:
        for c in t.columns:
            ids = entries.get((t.name, c.name))
            if ids is None:
                raise ParseError(f"{path}: no vocabulary for {t.name}.{c.name}")
            toks = tuple(ids[i] for i in range(len(ids)))
            if toks[: Vocabulary.N_SPECIAL] != Vocabulary.SPECIALS:
                raise ParseError(f"{path}: {t.name}.{c.name} lacks reserved special ids")
            space = schema.column_by_id(schema.key_space(schema.column_id(t.name, c.name)))
            key = (space.table, space.name, toks)
            if key not in built:
                built[key] = Vocabulary((space.table, space.name), toks[Vocabulary.N_SPECIAL:])
            out[(t.name, c.name)] = built[key]
    return out


@dataclass
class Database:
    """Schema plus cleaned rows and vocabularies: everything downstream needs."""

    schema: DatabaseSchema
    rows: dict[str, list[RowRecord]]
    vocabs: dict[tuple[str, str], Vocabulary] = field(default_factory=dict)

    def vocab(self, table: str, column: str) -> Vocabulary:
        return self.vocabs[(table, column)]

    def vocab_by_id(self, column_id: int) -> Vocabulary:
        c = self.schema.column_by_id(column_id)
        return self.vocabs[(c.table, c.name)]

    def sentences(self, table: str) -> list:
        return [encode_row(r, self.vocabs, self.schema) for r in self.rows.get(table, [])]

    def n_rows(self) -> int:
        return sum(len(v) for v in self.rows.values())


def load_database(
    schema: DatabaseSchema,
    data_dir,
    rules: Sequence[CleaningRule] = (),
    n_bins: int | None = None,
    share_key_spaces: bool = True,
) -> Database:
    """Read ``<data_dir>/<table>.csv`` for every table, clean, bin, build vocabularies."""
    data_dir = Path(data_dir)
    rows = {}
    for t in schema.tables:
        path = data_dir / f"{t.name}.csv"
        raw = load_table_csv(schema, t.name, path)
        rows[t.name] = apply_cleaning_rules(raw, [r for r in rules if r.table == t.name], schema)
    if n_bins:
        rows = bin_numeric_columns(schema, rows, n_bins)
    vocabs = build_vocabularies(schema, rows, share_key_spaces=share_key_spaces)
    return Database(schema, rows, vocabs)


def database_from_rows(
    schema: DatabaseSchema, rows: Mapping[str, Sequence], share_key_spaces: bool = True
) -> Database:
    """Build a Database from in-memory tables given as lists of cell tuples or RowRecords."""
    recs = {}
    for t in schema.tables:
        out = []
        for i, r in enumerate(rows.get(t.name, [])):
            if isinstance(r, RowRecord):
                out.append(r)
            else:
                cells = tuple(NULL if c is None or c == "" else str(c) for c in r)
                if len(cells) != t.n_columns:
                    raise ParseError(f"row {i} of {t.name!r} has wrong arity")
                out.append(RowRecord(t.name, cells, i))
        recs[t.name] = out
    return Database(schema, recs, build_vocabularies(schema, recs, share_key_spaces))

"""Relational schema: tables, columns and single-column FK-PK constraints."""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ParseError, SchemaError

ROLES = ("primary_key", "foreign_key", "attribute")
DTYPE_HINTS = ("categorical", "numeric", "text")


@dataclass(frozen=True)
class ColumnDef:
    name: str
    table: str
    role: str = "attribute"
    dtype_hint: str = "categorical"

    @property
    def qualname(self) -> str:
        return f"{self.table}.{self.name}"


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def primary_key(self) -> ColumnDef | None:
        for c in self.columns:
            if c.role == "primary_key":
                return c
        return None

    def column(self, name: str) -> ColumnDef:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"table {self.name!r} has no column {name!r}")

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError(f"table {self.name!r} has no column {name!r}")


@dataclass(frozen=True)
class ForeignKeyDef:
    from_table: str
    from_column: str
    to_table: str
    to_column: str

    def __str__(self) -> str:
        return f"{self.from_table}.{self.from_column}->{self.to_table}.{self.to_column}"


@dataclass(frozen=True)
class DatabaseSchema:
    """Validated schema. Construct through :func:`build_schema` or :func:`load_schema`.

    Every column gets a global integer id, assigned in table order then column
    order; sentences refer to columns by that id.
    """

    tables: tuple[TableDef, ...]
    foreign_keys: tuple[ForeignKeyDef, ...] = ()
    _column_ids: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ids = {}
        for t in self.tables:
            for c in t.columns:
                ids[(t.name, c.name)] = len(ids)
        object.__setattr__(self, "_column_ids", ids)

    def table(self, name: str) -> TableDef:
        for t in self.tables:
            if t.name == name:
                return t
        raise SchemaError(f"unknown table {name!r}")

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    @property
    def columns(self) -> list[ColumnDef]:
        return [c for t in self.tables for c in t.columns]

    @property
    def n_columns(self) -> int:
        return len(self._column_ids)

    def column_id(self, table: str, column: str) -> int:
        try:
            return self._column_ids[(table, column)]
        except KeyError:
            raise SchemaError(f"unknown column {table}.{column}") from None

    def column_by_id(self, column_id: int) -> ColumnDef:
        return self.columns[column_id]

    def foreign_key_of(self, table: str, column: str) -> ForeignKeyDef | None:
        for fk in self.foreign_keys:
            if fk.from_table == table and fk.from_column == column:
                return fk
        return None

    def key_space(self, column_id: int) -> int:
        """Column id whose vocabulary/embedding space ``column_id`` lives in.

        A foreign key shares the space of the primary key it references, so the
        same key value is the same entity on both sides of a join. All other
        columns are their own space.
        """
        col = self.column_by_id(column_id)
        seen = set()
        while col.role == "foreign_key":
            fk = self.foreign_key_of(col.table, col.name)
            if fk is None or (col.table, col.name) in seen:
                break
            seen.add((col.table, col.name))
            col = self.table(fk.to_table).column(fk.to_column)
        return self.column_id(col.table, col.name)

    def key_column_ids(self) -> set[int]:
        return {
            self.column_id(c.table, c.name)
            for c in self.columns
            if c.role in ("primary_key", "foreign_key")
        }

    def to_dict(self) -> dict:
        return {
            "tables": [
                {
                    "name": t.name,
                    "columns": [
                        {"name": c.name, "role": c.role, "dtype_hint": c.dtype_hint}
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
            "foreign_keys": [
                {
                    "from_table": fk.from_table,
                    "from_column": fk.from_column,
                    "to_table": fk.to_table,
                    "to_column": fk.to_column,
                }
                for fk in self.foreign_keys
            ],
        }

    def schema_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def is_connected(self) -> bool:
        if not self.tables:
            return True
        adj = defaultdict(set)
        for fk in self.foreign_keys:
            adj[fk.from_table].add(fk.to_table)
            adj[fk.to_table].add(fk.from_table)
        start = self.tables[0].name
        seen = {start}
        stack = [start]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(self.tables)


def build_schema(spec: Mapping) -> DatabaseSchema:
    """Validate a schema dict (same layout as the JSON file) and build the schema."""
    if not isinstance(spec, Mapping) or "tables" not in spec:
        raise ParseError("schema must be an object with a 'tables' list")
    tables = []
    seen_tables = set()
    for t in spec["tables"]:
        try:
            tname = t["name"]
            raw_cols = t["columns"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed table entry: {t!r}") from exc
        if tname in seen_tables:
            raise SchemaError(f"duplicate table name {tname!r}")
        seen_tables.add(tname)
        cols = []
        names = set()
        for c in raw_cols:
            try:
                cname = c["name"]
            except (KeyError, TypeError) as exc:
                raise ParseError(f"malformed column entry in {tname!r}: {c!r}") from exc
            role = c.get("role", "attribute")
            hint = c.get("dtype_hint", "categorical")
            if isinstance(cname, (list, tuple)):
                raise SchemaError(f"composite column {cname!r} in {tname!r} is not supported")
            if role not in ROLES:
                raise SchemaError(f"{tname}.{cname}: unknown role {role!r}")
            if hint not in DTYPE_HINTS:
                raise SchemaError(f"{tname}.{cname}: unknown dtype_hint {hint!r}")
            if cname in names:
                raise SchemaError(f"duplicate column {cname!r} in table {tname!r}")
            names.add(cname)
            cols.append(ColumnDef(cname, tname, role, hint))
        if sum(c.role == "primary_key" for c in cols) > 1:
            raise SchemaError(f"table {tname!r} declares more than one primary key")
        tables.append(TableDef(tname, tuple(cols)))

    by_name = {t.name: t for t in tables}
    fks = []
    for raw in spec.get("foreign_keys", []):
        try:
            fk = ForeignKeyDef(
                raw["from_table"], raw["from_column"], raw["to_table"], raw["to_column"]
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed foreign key entry: {raw!r}") from exc
        for part in (fk.from_column, fk.to_column):
            if isinstance(part, (list, tuple)):
                raise SchemaError(f"composite key in {raw!r} is not supported")
        if fk.from_table not in by_name or fk.to_table not in by_name:
            raise SchemaError(f"foreign key {fk} references an undeclared table")
        src = by_name[fk.from_table]
        dst = by_name[fk.to_table]
        if fk.from_column not in src.column_names or fk.to_column not in dst.column_names:
            raise SchemaError(f"foreign key {fk} references an undeclared column")
        if dst.column(fk.to_column).role != "primary_key":
            raise SchemaError(f"foreign key {fk} does not target a primary key")
        if src.column(fk.from_column).role == "primary_key":
            raise SchemaError(f"foreign key {fk} starts at a primary key column")
        fks.append(fk)
    if len(set(fks)) != len(fks):
        raise SchemaError("duplicate foreign key declaration")
    return DatabaseSchema(tuple(tables), tuple(fks))


def load_schema(path) -> DatabaseSchema:
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8") from exc
    return build_schema(spec)


def dump_schema(schema: DatabaseSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


def join_compatible_pairs(schema: DatabaseSchema) -> list[ForeignKeyDef]:
    """All declared FK-PK pairs, ordered by (from_table, from_column)."""
    return sorted(schema.foreign_keys, key=lambda fk: (fk.from_table, fk.from_column))


@dataclass
class ValidationIssue:
    kind: str  # "dangling_fk" | "duplicate_pk"
    table: str
    column: str
    value: str
    rows: tuple[int, ...]


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)
    connected: bool = True

    def __len__(self) -> int:
        return len(self.issues)

    def __bool__(self) -> bool:
        return bool(self.issues)

    def of_kind(self, kind: str) -> list[ValidationIssue]:
        return [i for i in self.issues if i.kind == kind]


def validate_data_against_schema(
    schema: DatabaseSchema, tables: Mapping[str, Sequence]
) -> ValidationReport:
    """Report dangling FK values and duplicated PK values; never mutates ``tables``.

    ``tables`` maps table name to a sequence of row records (anything with
    ``cells`` and ``row_index``). Null cells are neither dangling nor duplicates.
    """
    from .ingest import NULL

    report = ValidationReport(connected=schema.is_connected())
    pk_values: dict[tuple[str, str], set] = {}
    for t in schema.tables:
        pk = t.primary_key
        if pk is None or t.name not in tables:
            continue
        idx = t.index_of(pk.name)
        rows_by_value: dict[str, list[int]] = defaultdict(list)
        for r in tables[t.name]:
            v = r.cells[idx]
            if v != NULL:
                rows_by_value[v].append(r.row_index)
        pk_values[(t.name, pk.name)] = set(rows_by_value)
        for v, rows in rows_by_value.items():
            if len(rows) > 1:
                report.issues.append(
                    ValidationIssue("duplicate_pk", t.name, pk.name, v, tuple(rows))
                )
    for fk in join_compatible_pairs(schema):
        if fk.from_table not in tables or (fk.to_table, fk.to_column) not in pk_values:
            continue
        targets = pk_values[(fk.to_table, fk.to_column)]
        idx = schema.table(fk.from_table).index_of(fk.from_column)
        for r in tables[fk.from_table]:
            v = r.cells[idx]
            if v != NULL and v not in targets:
                report.issues.append(
                    ValidationIssue(
                        "dangling_fk", fk.from_table, fk.from_column, v, (r.row_index,)
                    )
                )
    return report

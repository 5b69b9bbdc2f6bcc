"""Training instances: row sentences, masked sentences, join pairs, NSP negatives, splits."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InsufficientRows, NoMaskablePosition, ParseError
from .ingest import NULL, Database, RowRecord, Vocabulary, encode_row
from .schema import ForeignKeyDef

# Shared special-token space for [PAD]/[CLS]/[SEP]; its column id is -1.
SPECIAL_COLUMN = -1
PAD, CLS, SEP = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple  # ((token_id, column_id), ...)
    source: tuple | None = None  # (table, row_index)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("a sentence needs at least one token")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def token_ids(self) -> list[int]:
        return [t for t, _ in self.tokens]

    @property
    def column_ids(self) -> list[int]:
        return [c for _, c in self.tokens]

    def token_at_column(self, column_id: int) -> int | None:
        for t, c in self.tokens:
            if c == column_id:
                return t
        return None

    def without_columns(self, column_ids) -> "Sentence":
        drop = set(column_ids)
        return Sentence(tuple(tc for tc in self.tokens if tc[1] not in drop), self.source)

    def permuted(self, order: Sequence[int]) -> "Sentence":
        return Sentence(tuple(self.tokens[i] for i in order), self.source)


@dataclass(frozen=True)
class MaskedSentence:
    base: Sentence  # mask already applied
    target: tuple  # (column_id, true token_id)
    mask_position: int

    def restore(self) -> Sentence:
        toks = list(self.base.tokens)
        toks[self.mask_position] = (self.target[1], self.target[0])
        return Sentence(tuple(toks), self.base.source)


@dataclass(frozen=True)
class SentencePair:
    first: Sentence
    second: Sentence
    label: int  # 1 positive, 0 negative
    join_key: tuple  # (key token in first, key token in second)
    key_columns: tuple = (None, None)  # column ids holding the join key

    def as_sentence(self) -> Sentence:
        """``[CLS] first [SEP] second [SEP]`` as one flat sentence."""
        cls_ = ((CLS, SPECIAL_COLUMN),)
        sep = ((SEP, SPECIAL_COLUMN),)
        return Sentence(cls_ + self.first.tokens + sep + self.second.tokens + sep, self.first.source)


@dataclass
class SplitAssignment:
    groups: dict = field(default_factory=dict)  # group value -> (train, valid, test) row ids

    @property
    def train(self) -> list[int]:
        return sorted(i for g in self.groups.values() for i in g[0])

    @property
    def valid(self) -> list[int]:
        return sorted(i for g in self.groups.values() for i in g[1])

    @property
    def test(self) -> list[int]:
        return sorted(i for g in self.groups.values() for i in g[2])


def row_sentences(rows: Sequence[RowRecord], db: Database) -> list[Sentence]:
    return [encode_row(r, db.vocabs, db.schema) for r in rows]


def _key_cell(db: Database, fk: ForeignKeyDef, table: str) -> int:
    if table == fk.from_table:
        return db.schema.table(table).index_of(fk.from_column)
    if table == fk.to_table:
        return db.schema.table(table).index_of(fk.to_column)
    raise ValueError(f"table {table!r} is not an endpoint of {fk}")


def key_column_id(db: Database, fk: ForeignKeyDef, table: str) -> int:
    col = fk.from_column if table == fk.from_table else fk.to_column
    return db.schema.column_id(table, col)


def materialize_join_sentences(
    fk: ForeignKeyDef,
    rows_first: Sequence[RowRecord],
    rows_second: Sequence[RowRecord],
    db: Database,
) -> list[SentencePair]:
    """Positive pairs for every (first, second) row agreeing on the FK-PK value.

    ``rows_first`` and ``rows_second`` come from the two endpoint tables of
    ``fk`` (either order). One-to-many joins give one pair per match; null and
    dangling keys give none. Output is ordered by first row, then second row.
    """
    if not rows_first or not rows_second:
        return []
    t1, t2 = rows_first[0].table, rows_second[0].table
    i1, i2 = _key_cell(db, fk, t1), _key_cell(db, fk, t2)
    c1, c2 = key_column_id(db, fk, t1), key_column_id(db, fk, t2)
    by_key = defaultdict(list)
    for r in rows_second:
        if r.cells[i2] is not NULL:
            by_key[r.cells[i2]].append(r)
    second_cache = {}
    pairs = []
    for r in rows_first:
        v = r.cells[i1]
        if v is NULL:
            continue
        matches = by_key.get(v, ())
        if not matches:
            continue
        s1 = encode_row(r, db.vocabs, db.schema)
        for m in matches:
            if m.row_index not in second_cache:
                second_cache[m.row_index] = encode_row(m, db.vocabs, db.schema)
            s2 = second_cache[m.row_index]
            key = (s1.token_at_column(c1), s2.token_at_column(c2))
            pairs.append(SentencePair(s1, s2, 1, key, (c1, c2)))
    return pairs


def sample_negatives(
    pairs: Sequence[SentencePair],
    k: int,
    rng: np.random.Generator,
    pool: Sequence[Sentence],
) -> list[SentencePair]:
    """Each positive followed by ``k`` negatives drawn uniformly from ``pool``.

    ``pool`` holds the sentences of the second table. A negative keeps the
    positive's first sentence and pairs it with a pool row whose key differs
    from the true one. Call again each epoch to resample.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not pairs:
        return []
    key_col = pairs[0].key_columns[1]
    pool_keys = np.array([s.token_at_column(key_col) for s in pool])
    if len(set(pool_keys.tolist())) < 2:
        raise InsufficientRows("negative sampling needs >= 2 distinct key values in the pool")
    eligible_cache: dict[int, np.ndarray] = {}
    out = []
    for p in pairs:
        if p.label != 1:
            continue
        out.append(p)
        true_key = p.join_key[1]
        if true_key not in eligible_cache:
            eligible_cache[true_key] = np.flatnonzero(pool_keys != true_key)
        eligible = eligible_cache[true_key]
        for j in rng.integers(0, len(eligible), size=k):
            neg = pool[eligible[j]]
            out.append(
                SentencePair(
                    p.first, neg, 0, (p.join_key[0], int(pool_keys[eligible[j]])), p.key_columns
                )
            )
    return out


def apply_mask(
    sentence: Sentence, rng: np.random.Generator, maskable_columns: Iterable[int] | None = None
) -> MaskedSentence:
    """Replace one uniformly chosen maskable position by its column's ``[MASK]``.

    Positions holding special tokens (``[UNK]`` nulls, ``[CLS]``/``[SEP]``)
    are never chosen since there is nothing to predict there.
    """
    positions = maskable_positions(sentence, maskable_columns)
    if not positions:
        raise NoMaskablePosition(f"no maskable position in sentence from {sentence.source}")
    pos = positions[int(rng.integers(len(positions)))]
    return mask_at(sentence, pos)


def mask_at(sentence: Sentence, position: int) -> MaskedSentence:
    tok, col = sentence.tokens[position]
    toks = list(sentence.tokens)
    toks[position] = (Vocabulary.MASK, col)
    return MaskedSentence(Sentence(tuple(toks), sentence.source), (col, tok), position)


def maskable_positions(sentence: Sentence, maskable_columns: Iterable[int] | None = None) -> list[int]:
    allowed = None if maskable_columns is None else set(maskable_columns)
    return [
        i
        for i, (tok, col) in enumerate(sentence.tokens)
        if col != SPECIAL_COLUMN and tok >= Vocabulary.N_SPECIAL and (allowed is None or col in allowed)
    ]


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    rest = n - sum(counts)
    # stable sort keeps earlier splits first on equal remainders
    order = sorted(range(len(ratios)), key=lambda i: -(quotas[i] - counts[i]))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_grouped(
    rows: Sequence[RowRecord],
    group_column: int | Callable[[RowRecord], object],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    rng: np.random.Generator | None = None,
    min_group: int = 3,
) -> SplitAssignment:
    """Per-group shuffled train/valid/test split of row indices.

    Groups smaller than ``min_group`` go entirely to train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three numbers summing to 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    key = group_column if callable(group_column) else (lambda r: r.cells[group_column])
    groups = defaultdict(list)
    for r in rows:
        groups[key(r)].append(r.row_index)
    out = SplitAssignment()
    for g in sorted(groups, key=lambda x: (x is None, str(x))):
        ids = list(groups[g])
        rng.shuffle(ids)
        if len(ids) < min_group:
            out.groups[g] = (sorted(ids), [], [])
            continue
        n_tr, n_va, _ = largest_remainder(len(ids), ratios)
        out.groups[g] = (
            sorted(ids[:n_tr]),
            sorted(ids[n_tr : n_tr + n_va]),
            sorted(ids[n_tr + n_va :]),
        )
    return out


def write_corpus(instances: Iterable, path) -> int:
    """JSON-lines corpus; returns the number of instances written."""
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst), separators=(",", ":")) + "\n")
            n += 1
    return n


def instance_to_dict(inst) -> dict:
    if isinstance(inst, MaskedSentence):
        return {
            "kind": "mlm",
            "tokens": [list(t) for t in inst.base.tokens],
            "mask_pos": inst.mask_position,
            "target": list(inst.target),
        }
    if isinstance(inst, SentencePair):
        return {
            "kind": "nsp",
            "tokens": [list(t) for t in inst.as_sentence().tokens],
            "label": int(inst.label),
        }
    raise TypeError(f"cannot serialise {type(inst).__name__}")


def read_corpus(path) -> list:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                toks = tuple((int(t), int(c)) for t, c in d["tokens"])
                if d["kind"] == "mlm":
                    out.append(
                        MaskedSentence(Sentence(toks), tuple(d["target"]), int(d["mask_pos"]))
                    )
                elif d["kind"] == "nsp":
                    out.append(_pair_from_flat(toks, int(d["label"])))
                else:
                    raise ValueError(d["kind"])
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ParseError(f"{path}: bad corpus line {lineno}") from exc
    return out


def _pair_from_flat(toks, label) -> SentencePair:
    seps = [i for i, (t, c) in enumerate(toks) if c == SPECIAL_COLUMN and t == SEP]
    if toks[0] != (CLS, SPECIAL_COLUMN) or len(seps) != 2 or seps[1] != len(toks) - 1:
        raise ValueError("nsp instance must look like [CLS] a [SEP] b [SEP]")
    first = Sentence(toks[1 : seps[0]])
    second = Sentence(toks[seps[0] + 1 : seps[1]])
    return SentencePair(first, second, label, (None, None))

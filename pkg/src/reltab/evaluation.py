"""Ranking metrics, the autocompletion and join-prediction protocols, and
attention / embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .baselines import SkipGramModel, baseline_scores, token_label
from .corpus import SPECIAL_COLUMN, SPECIAL_TOKENS, Sentence, SentencePair, mask_at
from .encoder import TableEncoderModel
from .errors import ConfigError, EmptyResults, NoCandidates, NoHeadForColumn
from .ingest import Database, Vocabulary, encode_row
from .schema import ForeignKeyDef
from .training import Task, join_orientation, task_pairs, task_sentences

TIE_BREAKS = ("token_id", "optimistic", "pessimistic")


@dataclass
class RankingResult:
    instance: object
    true_id: int
    rank: int
    pool_size: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.pool_size:
            raise ValueError(f"rank {self.rank} outside [1, {self.pool_size}]")


@dataclass
class MetricsReport:
    task: str
    model: str
    k: int
    hits_at_k: float
    mean_rank: float
    mrr: float
    n: int
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def consistent(self) -> bool:
        return metrics_consistent(self.hits_at_k, self.mean_rank, self.mrr)

    def to_dict(self) -> dict:
        out = {
            "task": self.task, "model": self.model, "k": self.k,
            "hits_at_k": self.hits_at_k, "mean_rank": self.mean_rank, "mrr": self.mrr,
            "n": self.n, "seed": self.seed,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def metrics_consistent(hits: float, mean_rank: float, mrr: float) -> bool:
    """Feasibility of a reported (hits@k, MR, MRR) triple: ranges plus MRR >= 1/MR."""
    return 0.0 <= hits <= 1.0 and mean_rank >= 1.0 and 0.0 < mrr <= 1.0 and mrr >= 1.0 / mean_rank - 1e-12


# ranks and metrics -------------------------------------------------------------


def rank_of(scores: np.ndarray, true_id: int, tie_break: str = "token_id") -> int:
    """1 + #strictly better + #equal scores that win the tie against ``true_id``."""
    scores = np.asarray(scores)
    if not 0 <= true_id < len(scores):
        raise IndexError(f"true id {true_id} outside pool of {len(scores)}")
    s = scores[true_id]
    greater = int(np.sum(scores > s))
    equal = scores == s
    if tie_break == "token_id":
        ties = int(np.sum(equal[:true_id]))
    elif tie_break == "optimistic":
        ties = 0
    elif tie_break == "pessimistic":
        ties = int(np.sum(equal)) - 1
    else:
        raise ValueError(f"unknown tie break {tie_break!r}")
    return 1 + greater + ties


def rank_candidates(scores, true_id: int, instance=None, tie_break: str = "token_id") -> RankingResult:
    scores = np.asarray(scores)
    return RankingResult(instance, int(true_id), rank_of(scores, true_id, tie_break), len(scores))


def compute_metrics(results: Sequence[RankingResult], k: int = 10, task: str = "", model: str = "",
                    seed=None, extra=None) -> MetricsReport:
    if not results:
        raise EmptyResults("no ranking results")
    ranks = np.array([r.rank for r in results], dtype=np.float64)
    return MetricsReport(
        task, model, int(k),
        hits_at_k=float(np.mean(ranks <= k)),
        mean_rank=float(np.mean(ranks)),
        mrr=float(np.mean(1.0 / ranks)),
        n=len(results), seed=seed, extra=dict(extra or {}),
    )


def random_mrr(n: int) -> float:
    """Expected MRR of a uniformly random ranking over ``n`` candidates: H_n / n."""
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)


def random_rr_std(n: int) -> float:
    """Standard deviation of 1/rank when the rank is uniform on 1..n."""
    r = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sqrt(np.mean(1.0 / r**2) - np.mean(1.0 / r) ** 2))


# autocompletion -------------------------------------------------------------------


@dataclass
class Instance:
    """One masked cell to rank: the sentence, where the target sits, and the answer."""

    id: object
    sentence: Sentence
    position: int
    column: int
    true_token: int


def autocompletion_instances(db: Database, task: Task, rows=None) -> list[Instance]:
    """Build the model inputs for the task's test rows (null targets skipped)."""
    tcol = db.schema.column_id(*task.target)
    if task.fk is None:
        rows = db.rows[task.table] if rows is None else rows
        sents = task_sentences(db, task, rows)
        ids = [r.row_index for r in rows]
    else:
        pairs = task_pairs(db, task, rows)
        sents = [p.as_sentence() for p in pairs]
        ids = [(p.first.source, p.second.source) for p in pairs]
    out = []
    for iid, s in zip(ids, sents):
        pos = [i for i, (tok, col) in enumerate(s.tokens) if col == tcol]
        if not pos:
            continue
        tok = s.tokens[pos[0]][0]
        if tok < Vocabulary.N_SPECIAL:
            continue
        out.append(Instance(iid, s, pos[0], tcol, tok))
    return out


def model_candidate_scores(model: TableEncoderModel, instances: Sequence[Instance],
                           batch_size: int = 64) -> list[np.ndarray]:
    """Per-instance logits over the target column's entities (masked cell)."""
    out = []
    with ag.no_grad():
        for i in range(0, len(instances), batch_size):
            chunk = instances[i : i + batch_size]
            masked = [mask_at(inst.sentence, inst.position) for inst in chunk]
            O, _, _ = model.forward([m.base for m in masked])
            by_col: dict[int, list[int]] = {}
            for j, inst in enumerate(chunk):
                by_col.setdefault(inst.column, []).append(j)
            scores = [None] * len(chunk)
            for col, idx in by_col.items():
                logits = model.masked_logits(O, np.array(idx), np.array([chunk[j].position for j in idx]), col)
                for r, j in enumerate(idx):
                    scores[j] = np.asarray(logits.data[r], dtype=np.float64)
            out.extend(scores)
    return out


def baseline_candidate_scores(model: SkipGramModel, db: Database, instances: Sequence[Instance]) -> list[np.ndarray]:
    out = []
    for inst in instances:
        vocab = db.vocab_by_id(inst.column)
        cands = [token_label(db, inst.column, t) for t in range(Vocabulary.N_SPECIAL, len(vocab))]
        context = [
            token_label(db, col, tok)
            for i, (tok, col) in enumerate(inst.sentence.tokens)
            if i != inst.position and col != SPECIAL_COLUMN and tok >= Vocabulary.N_SPECIAL
        ]
        out.append(baseline_scores(model, context, cands))
    return out


def evaluate_autocompletion(model, db: Database, task: Task, rows=None, k: int = 10,
                            model_name: str | None = None, seed=None, tie_break: str = "token_id",
                            return_results: bool = False):
    """Rank every entity of the target column for each test row and aggregate.

    ``model`` is a ``TableEncoderModel`` (scores = MLM logits) or a
    ``SkipGramModel`` (scores = cosine to the mean context embedding).
    """
    tcol = db.schema.column_id(*task.target)
    instances = autocompletion_instances(db, task, rows)
    if isinstance(model, TableEncoderModel):
        try:
            model.head_for(tcol)
        except NoHeadForColumn as exc:
            raise ConfigError(str(exc)) from exc
        scores = model_candidate_scores(model, instances)
        name = model_name or "relbert"
    elif isinstance(model, SkipGramModel):
        scores = baseline_candidate_scores(model, db, instances)
        name = model_name or "skipgram"
    else:
        raise TypeError(f"cannot evaluate {type(model).__name__}")
    results = [
        rank_candidates(s, inst.true_token - Vocabulary.N_SPECIAL, inst.id, tie_break)
        for inst, s in zip(instances, scores)
    ]
    pool = len(db.vocab_by_id(tcol)) - Vocabulary.N_SPECIAL
    report = compute_metrics(
        results, k, task=f"autocomplete:{task.table}.{task.target[1]}", model=name, seed=seed,
        extra={"pool_size": pool},
    )
    return (report, results) if return_results else report


# join prediction -------------------------------------------------------------------


def evaluate_join_prediction(model: TableEncoderModel, db: Database, fk: ForeignKeyDef, rows=None,
                             k: int = 10, pool_size: int | None = None, seed: int = 0,
                             model_name: str = "relbert-j", batch_size: int = 128,
                             tie_break: str = "token_id", return_results: bool = False):
    """For each row of the PK-side table, rank candidate rows of the FK-side table by NSP score.

    The pool is every FK-side row, or with ``pool_size`` a seeded sample that
    always contains the true matches. Rows with several matches score the
    rank of their best-ranked match.
    """
    first, second = join_orientation(fk)
    rows = db.rows[first] if rows is None else rows
    cand_rows = db.rows[second]
    if not cand_rows:
        raise NoCandidates(f"table {second!r} has no rows")
    cand_sents = db.sentences(second)
    col2 = db.schema.table(second).index_of(fk.from_column if second == fk.from_table else fk.to_column)
    col1 = db.schema.table(first).index_of(fk.to_column if first == fk.to_table else fk.from_column)
    rng = np.random.default_rng(seed)

    results = []
    with ag.no_grad():
        for r in rows:
            key = r.cells[col1]
            if key is None:
                continue
            truth = [j for j, c in enumerate(cand_rows) if c.cells[col2] == key]
            if not truth:
                continue
            pool = np.arange(len(cand_rows))
            if pool_size is not None and pool_size < len(cand_rows):
                others = np.setdiff1d(pool, truth)
                n_other = max(pool_size - len(truth), 0)
                pick = rng.choice(others, size=min(n_other, len(others)), replace=False)
                pool = np.sort(np.concatenate([np.array(truth), pick]))
            if len(pool) == 0:
                raise NoCandidates("empty candidate pool")
            s1 = encode_row(r, db.vocabs, db.schema)
            scores = np.empty(len(pool))
            for i in range(0, len(pool), batch_size):
                part = pool[i : i + batch_size]
                flat = [SentencePair(s1, cand_sents[j], 1, (None, None)).as_sentence() for j in part]
                O, _, _ = model.forward(flat)
                scores[i : i + len(part)] = np.asarray(model.nsp_logits(O).data, dtype=np.float64)
            positions = {int(j): p for p, j in enumerate(pool)}
            best = min(rank_of(scores, positions[t], tie_break) for t in truth)
            results.append(RankingResult((first, r.row_index), positions[truth[0]], best, len(pool)))
    report = compute_metrics(
        results, k, task=f"join:{fk}", model=model_name, seed=seed,
        extra={"pool_size": int(pool_size or len(cand_rows))},
    )
    return (report, results) if return_results else report


# export ----------------------------------------------------------------------------


def position_labels(model: TableEncoderModel, sentence: Sentence) -> list[str]:
    labels = []
    for tok, col in sentence.tokens:
        if col == SPECIAL_COLUMN:
            labels.append(SPECIAL_TOKENS[tok])
        else:
            labels.append(model.schema.column_by_id(col).qualname)
    return labels


def export_attention(model: TableEncoderModel, sentence: Sentence, out_dir, prefix: str = "attention") -> list[Path]:
    """One CSV per (layer, head): rows are queries, columns keys, labelled by column name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ag.no_grad():
        _, _, rec = model.forward([sentence], capture=True)
    labels = position_labels(model, sentence)
    paths = []
    for li, layer in enumerate(rec.layers):
        for h in range(layer.shape[1]):
            mat = layer[0, h]
            path = out_dir / f"{prefix}_layer{li}_head{h}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["query\\key"] + labels)
                for lab, row in zip(labels, mat):
                    w.writerow([lab] + [repr(float(x)) for x in row])
            paths.append(path)
    return paths


def read_attention_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    return labels, np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def export_embeddings(model: TableEncoderModel, db: Database, path) -> int:
    """CSV of (token label, d floats) for every entity of every column space."""
    path = Path(path)
    n = 0
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for space in model.spaces:
            emb = model.embeddings[space].data
            for tok in range(Vocabulary.N_SPECIAL, emb.shape[0]):
                w.writerow([token_label(db, space, tok)] + [repr(float(x)) for x in emb[tok]])
                n += 1
    return n


def export_skipgram_embeddings(model: SkipGramModel, path, kinds: Iterable[str] = ("tok:",)) -> int:
    kinds = tuple(kinds)
    n = 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for label, i in model.index.items():
            if label.startswith(kinds):
                w.writerow([label] + [repr(float(x)) for x in model.w_in[i]])
                n += 1
    return n


def results_to_dicts(results: Sequence[RankingResult]) -> list[dict]:
    return [asdict(r) for r in results]

"""Losses, Adam, and the two training schedules (RelBert-A and RelBert-J)."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .corpus import (
    MaskedSentence,
    Sentence,
    SentencePair,
    apply_mask,
    maskable_positions,
    materialize_join_sentences,
    sample_negatives,
)
from .encoder import ModelConfig, TableEncoderModel, init_from_word2vec
from .errors import ConfigError, NonFiniteError, ShapeError
from .ingest import Database, Vocabulary, encode_row
from .schema import ForeignKeyDef, join_compatible_pairs


@dataclass
class TrainConfig:
    variant: str = "A"
    d_model: int = 300
    n_layers: int = 4
    n_heads: int = 4
    ff_hidden: int = 1200
    activation: str = "gelu"
    dropout: float = 0.0
    init_std: float = 0.02
    batch_size: int = 32
    pretrain_epochs: int = 20
    finetune_epochs: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    neg_samples: int = 1
    seed: int = 0
    mask_keys: bool = False
    target: str | None = None  # "table.column" predicted during fine-tuning
    join: str | None = None  # "from_table.from_column" naming the fine-tuning FK
    use_nsp: bool = True
    w2v_init: bool = True
    w2v_epochs: int = 5
    precision: str = "f64"

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("A", "J"):
            raise ConfigError(f"variant must be A or J, got {self.variant!r}")
        for name in ("d_model", "n_heads", "ff_hidden", "batch_size", "neg_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_layers", "pretrain_epochs", "finetune_epochs", "w2v_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            self.d_model, self.n_layers, self.n_heads, self.ff_hidden,
            self.activation, self.dropout, self.init_std,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class LossReport:
    stage: str
    epoch: int
    l_mlm: float
    l_nsp: float
    l_total: float
    wall_ms: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# optimizer -------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: Sequence[Parameter], grads: Sequence, state: OptimizerState) -> None:
    """One Adam update with bias correction, in place. ``None`` grads are skipped."""
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        key = p.name or i
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps)

    def step(self) -> None:
        optimizer_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# losses ----------------------------------------------------------------------


def mlm_loss(batch: Sequence[MaskedSentence], model: TableEncoderModel, training=False, rng=None) -> Tensor:
    """Mean cross-entropy of the masked cells, each against its own column's entities."""
    if not batch:
        raise ValueError("empty batch")
    O, _, _ = model.forward([m.base for m in batch], training=training, rng=rng)
    groups: dict[int, list[int]] = {}
    for i, m in enumerate(batch):
        groups.setdefault(int(model.space_of[m.target[0]]), []).append(i)
    total = None
    for space in sorted(groups):
        idx = groups[space]
        rows = np.array(idx)
        pos = np.array([batch[i].mask_position for i in idx])
        targets = np.array([batch[i].target[1] - Vocabulary.N_SPECIAL for i in idx])
        if targets.min() < 0:
            raise ValueError("masked target is a special token")
        logits = model.masked_logits(O, rows, pos, batch[idx[0]].target[0])
        part = ag.ops.sum(ag.cross_entropy(logits, targets))
        total = part if total is None else total + part
    return ag.scale(total, 1.0 / len(batch))


def nsp_scores(pairs: Sequence[SentencePair], model: TableEncoderModel, training=False, rng=None) -> Tensor:
    O, _, _ = model.forward([p.as_sentence() for p in pairs], training=training, rng=rng)
    return model.nsp_logits(O)


def nsp_loss(pairs: Sequence[SentencePair], model: TableEncoderModel, training=False, rng=None) -> Tensor:
    """-[sum log sigmoid(v_pos) + sum log(1 - sigmoid(v_neg))] / n_positives."""
    labels = np.array([p.label for p in pairs], dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("nsp batch needs at least one positive")
    v = nsp_scores(pairs, model, training, rng)
    sign = np.where(labels, 1.0, -1.0).astype(v.dtype)
    ll = ag.ops.sum(ag.log_sigmoid(ag.mul(v, sign)))
    return ag.scale(ll, -1.0 / n_pos)


def nsp_loss_from_scores(v_pos: np.ndarray, v_neg: np.ndarray) -> float:
    """Plain-numpy version used as an independent check."""
    v_pos = np.atleast_1d(v_pos)
    return float(
        -(np.sum(-np.logaddexp(0.0, -v_pos)) + np.sum(-np.logaddexp(0.0, np.asarray(v_neg))))
        / len(v_pos)
    )


# tasks -----------------------------------------------------------------------


@dataclass
class Task:
    """What fine-tuning and evaluation predict.

    ``target`` is the (table, column) whose cell is masked. With ``fk`` set,
    each target-table row is paired with its join partner through ``fk``;
    cells of the partner that live in the target's space are dropped so the
    answer is not visible.
    """

    target: tuple
    fk: ForeignKeyDef | None = None

    @property
    def table(self) -> str:
        return self.target[0]

    def partner_table(self) -> str | None:
        if self.fk is None:
            return None
        return self.fk.to_table if self.fk.from_table == self.table else self.fk.from_table


def resolve_fk(db: Database, spec: str | None) -> ForeignKeyDef | None:
    if spec is None:
        return None
    table, _, column = spec.partition(".")
    fk = db.schema.foreign_key_of(table, column)
    if fk is None:
        raise ConfigError(f"no foreign key declared at {spec!r}")
    return fk


def resolve_task(db: Database, config: TrainConfig) -> Task | None:
    if config.target is None:
        return None
    table, _, column = config.target.partition(".")
    db.schema.column_id(table, column)
    fk = resolve_fk(db, config.join)
    if fk is None and config.use_nsp:
        # the FK leaving the target table through the target column, else any FK touching it
        fk = db.schema.foreign_key_of(table, column)
        if fk is None:
            touching = [f for f in join_compatible_pairs(db.schema) if table in (f.from_table, f.to_table)]
            fk = touching[0] if touching else None
    if fk is not None and table not in (fk.from_table, fk.to_table):
        raise ConfigError(f"join {fk} does not touch target table {table!r}")
    return Task((table, column), fk)


def task_pairs(db: Database, task: Task, rows=None) -> list[SentencePair]:
    """Positive pairs (target row, partner row) with target-space leaks removed."""
    rows = db.rows[task.table] if rows is None else rows
    partner = db.rows[task.partner_table()]
    pairs = materialize_join_sentences(task.fk, rows, partner, db)
    tcol = db.schema.column_id(*task.target)
    leak = _same_space_columns(db, tcol, exclude=tcol)
    return [
        SentencePair(p.first, p.second.without_columns(leak), p.label, p.join_key, p.key_columns)
        for p in pairs
    ]


def task_sentences(db: Database, task: Task, rows=None) -> list[Sentence]:
    """Model inputs for the task: flattened pairs, or plain rows without a join."""
    if task.fk is None:
        rows = db.rows[task.table] if rows is None else rows
        return [encode_row(r, db.vocabs, db.schema) for r in rows]
    return [p.as_sentence() for p in task_pairs(db, task, rows)]


def strip_second(pairs: Sequence[SentencePair], columns) -> list[SentencePair]:
    """Drop ``columns`` from the second sentence of each pair (labels and keys kept)."""
    if not columns:
        return list(pairs)
    return [
        SentencePair(p.first, p.second.without_columns(columns), p.label, p.join_key, p.key_columns)
        for p in pairs
    ]


def _same_space_columns(db: Database, column_id: int, exclude: int | None = None) -> set[int]:
    space = db.schema.key_space(column_id)
    return {
        c for c in range(db.schema.n_columns)
        if db.schema.key_space(c) == space and c != exclude
    }


def default_maskable(db: Database, mask_keys: bool) -> set[int]:
    keys = set() if mask_keys else db.schema.key_column_ids()
    return set(range(db.schema.n_columns)) - keys


# training loops ----------------------------------------------------------------


class Trainer:
    """Shared machinery: model, optimizer, RNG, epoch loops and loss logging."""

    def __init__(self, db: Database, config: TrainConfig, model: TableEncoderModel | None = None,
                 log_path=None, callback: Callable[[LossReport], None] | None = None):
        config.validate()
        self.db = db
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        with ag.default_dtype(config.dtype):
            self.model = model or TableEncoderModel.from_database(
                db, config.model_config(), seed=config.seed, dtype=config.dtype
            )
        self.opt = Adam(self.model.parameters(), config.lr, (config.beta1, config.beta2), config.adam_eps)
        self.reports: list[LossReport] = []
        self.log_path = Path(log_path) if log_path else None
        self.callback = callback
        if self.log_path is not None:
            self.log_path.write_text("", encoding="utf-8")

    def _step(self, loss: Tensor, batch_id: str) -> None:
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss in batch {batch_id}")
        ag.backward(loss)
        self.opt.step()
        self.opt.zero_grad()

    def _batches(self, n: int) -> list[np.ndarray]:
        order = self.rng.permutation(n)
        bs = self.config.batch_size
        return [order[i : i + bs] for i in range(0, n, bs)]

    def _report(self, stage, epoch, mlm_sum, nsp_sum, n_batches, t0) -> LossReport:
        l_mlm = mlm_sum / n_batches if n_batches else 0.0
        l_nsp = nsp_sum / n_batches if n_batches else 0.0
        rep = LossReport(stage, epoch, l_mlm, l_nsp, l_mlm + l_nsp, (time.perf_counter() - t0) * 1e3)
        self.reports.append(rep)
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(rep.to_json() + "\n")
        if self.callback is not None:
            self.callback(rep)
        return rep

    def _guard(self, fn, batch_id):
        try:
            return fn()
        except NonFiniteError as exc:
            raise NonFiniteError(f"batch {batch_id}: {exc}") from exc

    def mlm_epochs(self, stage: str, sentence_groups: Sequence[Sequence[Sentence]],
                   maskable: set[int] | None, epochs: int) -> None:
        """MLM over one or more sentence groups; batches never mix groups."""
        groups = [
            [s for s in g if maskable_positions(s, maskable)] for g in sentence_groups
        ]
        groups = [g for g in groups if g]
        if not groups:
            return
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            jobs = [(gi, b) for gi, g in enumerate(groups) for b in self._batches(len(g))]
            order = self.rng.permutation(len(jobs))
            total = 0.0
            for j in order:
                gi, idx = jobs[j]
                masked = [apply_mask(groups[gi][i], self.rng, maskable) for i in idx]
                bid = f"{stage}:{epoch}:{j}"
                loss = self._guard(lambda: mlm_loss(masked, self.model, True, self.rng), bid)
                total += float(loss.data)
                self._step(loss, bid)
            self._report(stage, epoch, total, 0.0, len(jobs), t0)

    def joint_epochs(self, stage: str, positives: Sequence[SentencePair], pool: Sequence[Sentence],
                     maskable: set[int] | None, epochs: int, use_mlm: bool = True,
                     hidden_columns: set[int] = frozenset()) -> None:
        """Fine-tune on join pairs: L = L_mlm(masked positives) + L_nsp(positives + negatives).

        ``hidden_columns`` are removed from the second sentence of every
        sampled negative (the pool itself must keep its key column so that
        true partners can be excluded).
        """
        if not positives:
            raise ConfigError("no positive join pairs to train on")
        k = self.config.neg_samples
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            grouped = strip_second(sample_negatives(positives, k, self.rng, pool), hidden_columns)
            blocks = [grouped[i : i + k + 1] for i in range(0, len(grouped), k + 1)]
            mlm_sum = nsp_sum = 0.0
            batches = self._batches(len(blocks))
            for b, idx in enumerate(batches):
                pairs = [p for i in idx for p in blocks[i]]
                bid = f"{stage}:{epoch}:{b}"

                def loss_fn():
                    l_nsp = nsp_loss(pairs, self.model, True, self.rng)
                    l_mlm = None
                    if use_mlm:
                        flat = [blocks[i][0].as_sentence() for i in idx]
                        flat = [s for s in flat if maskable_positions(s, maskable)]
                        if flat:
                            masked = [apply_mask(s, self.rng, maskable) for s in flat]
                            l_mlm = mlm_loss(masked, self.model, True, self.rng)
                    return l_mlm, l_nsp

                l_mlm, l_nsp = self._guard(loss_fn, bid)
                loss = l_nsp if l_mlm is None else l_mlm + l_nsp
                mlm_sum += 0.0 if l_mlm is None else float(l_mlm.data)
                nsp_sum += float(l_nsp.data)
                self._step(loss, bid)
            self._report(stage, epoch, mlm_sum, nsp_sum, len(batches), t0)

    def maybe_w2v_init(self) -> None:
        if not self.config.w2v_init:
            return
        from .baselines import SkipGramConfig, column_vectors, table2vec_corpus, train_skipgram

        corpus = table2vec_corpus(self.db)
        if not corpus:
            return
        sg = train_skipgram(
            corpus,
            SkipGramConfig(dim=self.config.d_model, epochs=self.config.w2v_epochs,
                           window=None, seed=self.config.seed),
        )
        init_from_word2vec(self.model, column_vectors(sg, self.db), self.db.vocabs, seed=self.config.seed)


def _rows_without(db: Database, table: str, holdout) -> list:
    rows = db.rows.get(table, [])
    if not holdout:
        return list(rows)
    return [r for r in rows if (table, r.row_index) not in holdout]


def train_relbert_a(db: Database, config: TrainConfig, holdout: Iterable = (), model=None,
                    log_path=None, callback=None):
    """Pairwise-join MLM pre-training, then joint MLM + NSP fine-tuning.

    ``holdout`` lists (table, row_index) rows kept out of both stages (the
    evaluation rows of the task table). Without any join (or with
    ``use_nsp=False``) both stages fall back to MLM on plain row sentences.
    Returns (model, reports).
    """
    if config.variant != "A":
        raise ConfigError("train_relbert_a needs variant A")
    holdout = set(map(tuple, holdout))
    with ag.default_dtype(config.dtype):
        tr = Trainer(db, config, model, log_path, callback)
        if model is None:
            tr.maybe_w2v_init()
        maskable = default_maskable(db, config.mask_keys)
        fks = join_compatible_pairs(db.schema)

        groups = []
        for fk in fks:
            pairs = materialize_join_sentences(
                fk, _rows_without(db, fk.from_table, holdout), _rows_without(db, fk.to_table, holdout), db
            )
            if pairs:
                groups.append([p.as_sentence() for p in pairs])
        if not groups:
            groups = [
                [encode_row(r, db.vocabs, db.schema) for r in _rows_without(db, t.name, holdout)]
                for t in db.schema.tables
            ]
        tr.mlm_epochs("pretrain", groups, maskable, config.pretrain_epochs)

        task = resolve_task(db, config)
        if task is None:
            tr.mlm_epochs("finetune", groups, maskable, config.finetune_epochs)
        else:
            tcol = {db.schema.column_id(*task.target)}
            rows = _rows_without(db, task.table, holdout)
            if task.fk is not None and config.use_nsp:
                positives = task_pairs(db, task, rows)
                tcol_id = db.schema.column_id(*task.target)
                leak = _same_space_columns(db, tcol_id, exclude=tcol_id)
                tr.joint_epochs("finetune", positives, db.sentences(task.partner_table()), tcol,
                                config.finetune_epochs, hidden_columns=leak)
            else:
                sents = task_sentences(db, Task(task.target, None), rows)
                tr.mlm_epochs("finetune", [sents], tcol, config.finetune_epochs)
    return tr.model, tr.reports


def join_orientation(fk: ForeignKeyDef) -> tuple[str, str]:
    """(first, second) tables for join prediction: the PK side predicts FK-side rows."""
    return fk.to_table, fk.from_table


def train_relbert_j(db: Database, config: TrainConfig, holdout: Iterable = (), model=None,
                    log_path=None, callback=None):
    """Independent per-table MLM, then NSP fine-tuning on one FK-PK join.

    ``holdout`` lists (table, row_index) rows of the first (PK-side) table
    whose join pairs are kept out of fine-tuning. Returns (model, reports).
    """
    if config.variant != "J":
        raise ConfigError("train_relbert_j needs variant J")
    fks = join_compatible_pairs(db.schema)
    if len(db.schema.tables) < 2 or not fks:
        raise ConfigError("variant J needs at least two tables sharing a foreign key")
    fk = resolve_fk(db, config.join) or fks[0]
    holdout = set(map(tuple, holdout))
    with ag.default_dtype(config.dtype):
        tr = Trainer(db, config, model, log_path, callback)
        if model is None:
            tr.maybe_w2v_init()
        maskable = default_maskable(db, config.mask_keys)
        groups = [db.sentences(t.name) for t in db.schema.tables]
        tr.mlm_epochs("pretrain", groups, maskable, config.pretrain_epochs)
        first, second = join_orientation(fk)
        positives = materialize_join_sentences(fk, _rows_without(db, first, holdout), db.rows[second], db)
        tr.joint_epochs("finetune", positives, db.sentences(second), None, config.finetune_epochs,
                        use_mlm=False)
    return tr.model, tr.reports


def train(db: Database, config: TrainConfig, **kwargs):
    if config.variant == "A":
        return train_relbert_a(db, config, **kwargs)
    return train_relbert_j(db, config, **kwargs)

"""Table encoder: per-column embedding spaces, a position-free transformer stack,
per-column output heads for masked-cell prediction and a [CLS] join head."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .corpus import PAD, SPECIAL_COLUMN, SPECIAL_TOKENS, MaskedSentence, Sentence, SentencePair
from .errors import (
    CheckpointIOError,
    ConfigError,
    DimensionMismatch,
    NoHeadForColumn,
    SchemaHashMismatch,
    VersionMismatch,
)
from .ingest import Vocabulary
from .schema import DatabaseSchema, build_schema

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 300
    n_layers: int = 4
    n_heads: int = 4
    ff_hidden: int = 1200
    activation: str = "gelu"
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.ff_hidden <= 0 or self.n_layers < 0:
            raise ConfigError("model sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Batch:
    tokens: np.ndarray  # (B, S) int
    columns: np.ndarray  # (B, S) int, -1 for the special space
    valid: np.ndarray  # (B, S) bool, False on padding

    @property
    def shape(self):
        return self.tokens.shape


def make_batch(sentences: Sequence[Sentence]) -> Batch:
    """Stack sentences, right-padding shorter ones with ``[PAD]``."""
    if not sentences:
        raise ValueError("empty batch")
    S = max(len(s) for s in sentences)
    B = len(sentences)
    tokens = np.full((B, S), PAD, dtype=np.int64)
    cols = np.full((B, S), SPECIAL_COLUMN, dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    for i, s in enumerate(sentences):
        n = len(s)
        tokens[i, :n] = s.token_ids
        cols[i, :n] = s.column_ids
        valid[i, :n] = True
    return Batch(tokens, cols, valid)


@dataclass
class AttentionRecord:
    """Attention weights per layer, each of shape (batch, heads, seq, seq)."""

    layers: list = field(default_factory=list)

    def matrix(self, layer: int, head: int, item: int = 0) -> np.ndarray:
        return self.layers[layer][item, head]


class EncoderLayer:
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d, f, std = cfg.d_model, cfg.ff_hidden, cfg.init_std
        self.cfg = cfg
        p = f"layer{index}."

        def w(name, shape):
            return Parameter(rng.normal(0.0, std, size=shape), name=p + name, dtype=dtype)

        def const(name, shape, value):
            return Parameter(np.full(shape, value), name=p + name, dtype=dtype)

        self.wq, self.bq = w("attn.wq", (d, d)), const("attn.bq", (d,), 0.0)
        self.wk, self.bk = w("attn.wk", (d, d)), const("attn.bk", (d,), 0.0)
        self.wv, self.bv = w("attn.wv", (d, d)), const("attn.bv", (d,), 0.0)
        self.wo, self.bo = w("attn.wo", (d, d)), const("attn.bo", (d,), 0.0)
        self.ln1_g, self.ln1_b = const("ln1.gain", (d,), 1.0), const("ln1.bias", (d,), 0.0)
        self.w1, self.b1 = w("ffn.w1", (d, f)), const("ffn.b1", (f,), 0.0)
        self.w2, self.b2 = w("ffn.w2", (f, d)), const("ffn.b2", (d,), 0.0)
        self.ln2_g, self.ln2_b = const("ln2.gain", (d,), 1.0), const("ln2.bias", (d,), 0.0)

    def parameters(self) -> list[Parameter]:
        return [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.ln1_g, self.ln1_b, self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]

    def __call__(self, x: Tensor, key_mask: np.ndarray, training=False, rng=None, capture=None):
        B, S, d = x.shape
        h, dh = self.cfg.n_heads, self.cfg.head_dim

        def heads(t):
            return ag.transpose(ag.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

        q = heads(x @ self.wq + self.bq)
        k = heads(x @ self.wk + self.bk)
        v = heads(x @ self.wv + self.bv)
        scores = ag.scale(q @ ag.transpose(k), 1.0 / np.sqrt(dh))
        attn = ag.row_softmax(scores, mask=key_mask[:, None, None, :])
        if capture is not None:
            capture.append(attn.data.copy())
        ctx = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (B, S, d))
        out = ctx @ self.wo + self.bo
        out = ag.dropout(out, self.cfg.dropout, rng, training)
        x = ag.mul(ag.layer_norm(x + out), self.ln1_g) + self.ln1_b
        act = ag.gelu if self.cfg.activation == "gelu" else ag.relu
        ff = act(x @ self.w1 + self.b1) @ self.w2 + self.b2
        ff = ag.dropout(ff, self.cfg.dropout, rng, training)
        return ag.mul(ag.layer_norm(x + ff), self.ln2_g) + self.ln2_b


class TableEncoderModel:
    """Column embedding tables, encoder stack, per-column MLM heads and an NSP head.

    Embedding spaces are keyed by the column id that owns them (a foreign key
    uses its primary key's space, see ``DatabaseSchema.key_space``). There is
    no positional embedding: inputs are sets of (token, column) pairs.
    """

    def __init__(
        self,
        schema: DatabaseSchema,
        vocab_sizes: Mapping[int, int],
        config: ModelConfig,
        head_spaces: Sequence[int] | None = None,
        seed: int = 0,
        share_key_spaces: bool = True,
        dtype=None,
    ):
        self.schema = schema
        self.config = config
        self.share_key_spaces = share_key_spaces
        self.dtype = dtype or ag.get_default_dtype()
        rng = np.random.default_rng(seed)
        d, std = config.d_model, config.init_std
        self.space_of = np.array(
            [schema.key_space(c) if share_key_spaces else c for c in range(schema.n_columns)],
            dtype=np.int64,
        )
        self.spaces = sorted(int(s) for s in set(self.space_of.tolist()))
        missing = [s for s in self.spaces if s not in vocab_sizes]
        if missing:
            raise ConfigError(f"no vocabulary size for column spaces {missing}")
        self.vocab_sizes = {s: int(vocab_sizes[s]) for s in self.spaces}

        self.special = Parameter(rng.normal(0.0, std, size=(len(SPECIAL_TOKENS), d)),
                                 name="emb.[special]", dtype=self.dtype)
        self.embeddings: dict[int, Parameter] = {}
        for s in self.spaces:
            self.embeddings[s] = Parameter(
                rng.normal(0.0, std, size=(self.vocab_sizes[s], d)),
                name=f"emb.{self._label(s)}",
                dtype=self.dtype,
            )
        self.layers = [EncoderLayer(i, config, rng, self.dtype) for i in range(config.n_layers)]
        head_spaces = self.spaces if head_spaces is None else sorted({int(self.space_of[c]) for c in head_spaces})
        self.heads: dict[int, Parameter] = {}
        for s in head_spaces:
            n_ent = self.vocab_sizes[s] - Vocabulary.N_SPECIAL
            self.heads[s] = Parameter(rng.normal(0.0, std, size=(d, n_ent)),
                                      name=f"head.{self._label(s)}", dtype=self.dtype)
        self.nsp_w = Parameter(rng.normal(0.0, std, size=(d, 1)), name="nsp.w", dtype=self.dtype)
        self.nsp_b = Parameter(np.zeros(1), name="nsp.b", dtype=self.dtype)

    @classmethod
    def from_database(cls, db, config: ModelConfig, head_columns=None, seed: int = 0, dtype=None):
        sizes = {}
        for t in db.schema.tables:
            for c in t.columns:
                cid = db.schema.column_id(t.name, c.name)
                space = db.schema.key_space(cid)
                sizes[space] = len(db.vocabs[(t.name, c.name)])
        return cls(db.schema, sizes, config, head_columns, seed=seed, dtype=dtype)

    def _label(self, column_id: int) -> str:
        c = self.schema.column_by_id(column_id)
        return f"{c.table}.{c.name}"

    # parameters ---------------------------------------------------------

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        out[self.special.name] = self.special
        for s in self.spaces:
            out[self.embeddings[s].name] = self.embeddings[s]
        for layer in self.layers:
            for p in layer.parameters():
                out[p.name] = p
        for s in sorted(self.heads):
            out[self.heads[s].name] = self.heads[s]
        out[self.nsp_w.name] = self.nsp_w
        out[self.nsp_b.name] = self.nsp_b
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def head_for(self, column_id: int) -> Parameter:
        space = int(self.space_of[column_id])
        if space not in self.heads:
            raise NoHeadForColumn(f"no output head for column {self._label(column_id)}")
        return self.heads[space]

    def n_candidates(self, column_id: int) -> int:
        return self.head_for(column_id).shape[1]

    # forward ------------------------------------------------------------

    def embed(self, batch: Batch) -> Tensor:
        """Input matrix P: each token looked up in its own column's space."""
        tokens, cols = batch.tokens, batch.columns
        special = cols == SPECIAL_COLUMN
        spaces = np.where(special, -1, self.space_of[np.where(special, 0, cols)])
        out = None
        present = [-1] + [s for s in self.spaces if np.any(spaces == s)]
        for s in present:
            sel = spaces == s
            if not sel.any():
                continue
            table = self.special if s == -1 else self.embeddings[s]
            ids = np.where(sel, tokens, 0)
            if ids.max() >= table.shape[0] or ids.min() < 0:
                raise IndexError(f"token id out of range for space {s}")
            part = ag.mul(ag.embedding_lookup(table, ids), sel[..., None].astype(self.dtype))
            out = part if out is None else out + part
        return out

    def encode(self, P: Tensor, valid: np.ndarray, training=False, rng=None, capture=False):
        """Run the encoder stack; returns (O, AttentionRecord or None)."""
        record = AttentionRecord() if capture else None
        x = P
        for layer in self.layers:
            x = layer(x, valid, training=training, rng=rng,
                      capture=record.layers if record is not None else None)
        return x, record

    def forward(self, sentences: Sequence[Sentence], training=False, rng=None, capture=False):
        batch = make_batch(sentences)
        O, rec = self.encode(self.embed(batch), batch.valid, training, rng, capture)
        return O, batch, rec

    def masked_logits(self, O: Tensor, rows: np.ndarray, positions: np.ndarray, column_id: int) -> Tensor:
        """Logits over the entities of ``column_id``'s space for the selected outputs."""
        head = self.head_for(column_id)
        picked = ag.ops.slice(O, (np.asarray(rows), np.asarray(positions)))
        return picked @ head

    def nsp_logits(self, O: Tensor) -> Tensor:
        cls_out = ag.ops.slice(O, (slice(None), 0))
        return ag.reshape(cls_out @ self.nsp_w + self.nsp_b, (O.shape[0],))


def embed_sentence(sentence, model: TableEncoderModel) -> Tensor:
    """P for one sentence or pair: (seq_len, d)."""
    if isinstance(sentence, SentencePair):
        sentence = sentence.as_sentence()
    P = model.embed(make_batch([sentence]))
    return ag.reshape(P, P.shape[1:])


def encode(P: Tensor, model: TableEncoderModel, capture: bool = False):
    """O = TEncoder(P) for a single (seq_len, d) input; returns (O, record)."""
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError("P must be (seq_len >= 1, d)")
    O, rec = model.encode(ag.reshape(P, (1,) + P.shape), np.ones((1, P.shape[0]), bool), capture=capture)
    return ag.reshape(O, P.shape), rec


def mlm_logits(O: Tensor, mask_position: int, target_column: int, model: TableEncoderModel) -> Tensor:
    """Logits for the masked cell over its column's entities (specials excluded).

    Logit ``j`` belongs to token id ``j + Vocabulary.N_SPECIAL``.
    """
    head = model.head_for(target_column)
    if not 0 <= mask_position < O.shape[0]:
        raise IndexError("mask position out of range")
    row = ag.ops.slice(O, (slice(mask_position, mask_position + 1),))
    return ag.reshape(row @ head, (head.shape[1],))


def nsp_score(O: Tensor, model: TableEncoderModel) -> Tensor:
    """Join score v from the [CLS] output (row 0); ``sigmoid(v)`` is the probability."""
    row = ag.ops.slice(O, (slice(0, 1),))
    return ag.reshape(row @ model.nsp_w + model.nsp_b, ())


def init_from_word2vec(
    model: TableEncoderModel,
    vectors: Mapping[tuple[str, str], Mapping[str, np.ndarray]],
    vocabs: Mapping[tuple[str, str], Vocabulary],
    seed: int = 0,
) -> TableEncoderModel:
    """Overwrite embedding rows with pretrained vectors.

    ``vectors`` maps (table, column) to {cell string: vector}. Rows for
    specials and for entities without a vector are redrawn from
    N(0, init_std^2) with a generator seeded by ``seed``.
    """
    d = model.config.d_model
    for vecs in vectors.values():
        for v in vecs.values():
            if np.shape(v) != (d,):
                raise DimensionMismatch(f"pretrained dimension {np.shape(v)} != d_model {d}")
            break
    rng = np.random.default_rng(seed)
    std = model.config.init_std
    for s in model.spaces:
        col = model.schema.column_by_id(s)
        vocab = vocabs[(col.table, col.name)]
        # merge vectors from every column living in this space
        merged = {}
        for c in model.schema.columns:
            cid = model.schema.column_id(c.table, c.name)
            if int(model.space_of[cid]) == s:
                merged.update(vectors.get((c.table, c.name), {}))
        table = model.embeddings[s].data
        fresh = rng.normal(0.0, std, size=table.shape)
        for i in range(len(vocab)):
            if not vocab.is_special(i) and vocab.decode(i) in merged:
                table[i] = np.asarray(merged[vocab.decode(i)], dtype=table.dtype)
            else:
                table[i] = fresh[i]
    return model


# checkpoints ----------------------------------------------------------------


def write_tensors(named: Mapping[str, np.ndarray], path) -> None:
    """Binary tensor file: per tensor ``<u4 name_len><name><u4 ndim><u8 dims...><f8 data...>``."""
    with Path(path).open("wb") as fh:
        for name, arr in named.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read {path}: {exc}") from exc
    out = OrderedDict()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointIOError(f"{path}: truncated tensor file")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        out[name] = data.astype(np.float64)
    return out


def save_checkpoint(model: TableEncoderModel, path, vocabs=None, extra: Mapping | None = None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointIOError(f"cannot create {path}: {exc}") from exc
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "schema_hash": model.schema.schema_hash(),
        "schema": model.schema.to_dict(),
        "vocab_sizes": {str(s): n for s, n in model.vocab_sizes.items()},
        "head_spaces": sorted(model.heads),
        "share_key_spaces": model.share_key_spaces,
        "dtype": np.dtype(model.dtype).name,
    }
    if vocabs is not None:
        meta["vocab_hashes"] = {f"{t}.{c}": v.digest() for (t, c), v in sorted(vocabs.items())}
    if extra:
        meta["extra"] = dict(extra)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_tensors({n: p.data for n, p in model.named_parameters().items()}, path / "params.bin")
    return path


def load_meta(path) -> dict:
    try:
        return json.loads((Path(path) / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointIOError(f"cannot read checkpoint metadata in {path}: {exc}") from exc


def load_checkpoint(path, schema: DatabaseSchema | None = None) -> TableEncoderModel:
    meta = load_meta(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {meta.get('format_version')} != {FORMAT_VERSION}")
    if schema is not None and schema.schema_hash() != meta["schema_hash"]:
        raise SchemaHashMismatch("checkpoint was trained on a different schema")
    schema = schema or build_schema(meta["schema"])
    dtype = np.dtype(meta.get("dtype", "float64")).type
    model = TableEncoderModel(
        schema,
        {int(k): v for k, v in meta["vocab_sizes"].items()},
        ModelConfig(**meta["config"]),
        head_spaces=meta["head_spaces"],
        share_key_spaces=meta.get("share_key_spaces", True),
        dtype=dtype,
    )
    tensors = read_tensors(Path(path) / "params.bin")
    params = model.named_parameters()
    if set(tensors) != set(params):
        raise CheckpointIOError(f"{path}: parameter names do not match the model")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointIOError(f"{path}: shape mismatch for {name}")
        p.data[...] = tensors[name]
    return model

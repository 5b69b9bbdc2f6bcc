"""Word2vec-style baselines: Table2Vec (rows as sentences) and EmbDi
(random walks over a token / row-id / column-id graph), plus a cosine
ranking adapter so they can be scored like the encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .errors import EmptyContext
from .ingest import Database, Vocabulary

TOKEN, RID, CID = 0, 1, 2


def token_label(db: Database, column_id: int, token_id: int) -> str:
    """Node/word label of a cell token, namespaced by its column space."""
    space = db.schema.column_by_id(db.schema.key_space(column_id))
    return f"tok:{space.table}.{space.name}.{token_id}"


def _row_tokens(db: Database, table: str, row) -> list[tuple[int, int]]:
    tdef = db.schema.table(table)
    out = []
    for c, cell in zip(tdef.columns, row.cells):
        tok = db.vocabs[(table, c.name)].encode(cell)
        if tok >= Vocabulary.N_SPECIAL:
            out.append((db.schema.column_id(table, c.name), tok))
    return out


def table2vec_corpus(db: Database, holdout: Iterable = ()) -> list[list[str]]:
    """One sentence per row of every table (null cells skipped)."""
    holdout = set(map(tuple, holdout))
    corpus = []
    for t in db.schema.tables:
        for r in db.rows.get(t.name, []):
            if (t.name, r.row_index) in holdout:
                continue
            sent = [token_label(db, c, tok) for c, tok in _row_tokens(db, t.name, r)]
            if sent:
                corpus.append(sent)
    return corpus


@dataclass
class SkipGramConfig:
    dim: int = 300
    epochs: int = 5
    window: int | None = None  # None: the whole sentence is the context
    negatives: int = 5
    lr: float = 0.025
    min_lr: float = 1e-4
    batch_size: int = 256
    seed: int = 0


@dataclass
class SkipGramModel:
    labels: list
    index: dict
    w_in: np.ndarray
    w_out: np.ndarray
    noise: np.ndarray  # unigram^0.75 distribution over labels

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    def vector(self, label: str) -> np.ndarray:
        return self.w_in[self.index[label]]

    def __contains__(self, label) -> bool:
        return label in self.index


def skipgram_pairs(corpus_ids: Sequence[np.ndarray], window: int | None) -> np.ndarray:
    """All (center, context) id pairs; ``window=None`` pairs every ordered couple in a sentence."""
    chunks = []
    for sent in corpus_ids:
        n = len(sent)
        if n < 2:
            continue
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = i != j
        if window is not None:
            keep &= np.abs(i - j) <= window
        chunks.append(np.stack([sent[i[keep]], sent[j[keep]]], axis=1))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def sample_noise(rng, noise: np.ndarray, forbidden: np.ndarray, k: int) -> np.ndarray:
    """``k`` noise ids per row of ``forbidden`` (B, m), never equal to any forbidden id in that row."""
    cdf = np.cumsum(noise)
    cdf /= cdf[-1]
    out = np.searchsorted(cdf, rng.random((forbidden.shape[0], k)), side="right")
    out = np.minimum(out, len(noise) - 1)
    for _ in range(100):
        bad = (out[:, :, None] == forbidden[:, None, :]).any(axis=2)
        if not bad.any():
            return out
        redraw = np.searchsorted(cdf, rng.random(int(bad.sum())), side="right")
        out[bad] = np.minimum(redraw, len(noise) - 1)
    # tiny vocabularies: fall back to an explicit draw over allowed ids
    for r, c in zip(*np.nonzero((out[:, :, None] == forbidden[:, None, :]).any(axis=2))):
        allowed = np.setdiff1d(np.arange(len(noise)), forbidden[r])
        p = noise[allowed] / noise[allowed].sum()
        out[r, c] = allowed[rng.choice(len(allowed), p=p)]
    return out


def train_skipgram(corpus: Sequence[Sequence[str]], config: SkipGramConfig) -> SkipGramModel:
    """Skip-gram with negative sampling, mini-batch SGD, single-threaded and seeded."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(config.seed)
    counts: dict[str, int] = {}
    for sent in corpus:
        for w in sent:
            counts[w] = counts.get(w, 0) + 1
    labels = sorted(counts)
    index = {w: i for i, w in enumerate(labels)}
    freq = np.array([counts[w] for w in labels], dtype=np.float64)
    noise = freq**0.75
    noise /= noise.sum()
    V, d = len(labels), config.dim
    w_in = (rng.random((V, d)) - 0.5) / d
    w_out = np.zeros((V, d))
    model = SkipGramModel(labels, index, w_in, w_out, noise)
    if config.epochs == 0:
        return model

    ids = [np.array([index[w] for w in s], dtype=np.int64) for s in corpus]
    pairs = skipgram_pairs(ids, config.window)
    if len(pairs) == 0:
        return model
    if V < 3:
        # no token is available as noise for every pair
        return model
    bs = config.batch_size
    total_steps = config.epochs * int(np.ceil(len(pairs) / bs))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), bs):
            batch = pairs[order[start : start + bs]]
            c, o = batch[:, 0], batch[:, 1]
            negs = sample_noise(rng, noise, batch, config.negatives)
            lr = config.lr - (config.lr - config.min_lr) * step / max(total_steps, 1)
            step += 1
            vc = w_in[c]  # (B, d)
            targets = np.concatenate([o[:, None], negs], axis=1)  # (B, 1+k)
            vo = w_out[targets]  # (B, 1+k, d)
            score = np.einsum("bd,bkd->bk", vc, vo)
            label = np.zeros_like(score)
            label[:, 0] = 1.0
            g = special.expit(score) - label  # d loss / d score
            grad_c = np.einsum("bk,bkd->bd", g, vo)
            grad_o = g[:, :, None] * vc[:, None, :]
            np.add.at(w_in, c, -lr * grad_c)
            np.add.at(w_out, targets.reshape(-1), -lr * grad_o.reshape(-1, d))
    return model


def train_table2vec(db: Database, config: SkipGramConfig, holdout: Iterable = ()) -> SkipGramModel:
    cfg = SkipGramConfig(**{**config.__dict__, "window": None})
    return train_skipgram(table2vec_corpus(db, holdout), cfg)


def column_vectors(model: SkipGramModel, db: Database) -> dict:
    """{(table, column): {cell string: vector}} for encoder initialisation."""
    out = {}
    for t in db.schema.tables:
        for c in t.columns:
            cid = db.schema.column_id(t.name, c.name)
            vocab = db.vocabs[(t.name, c.name)]
            vecs = {}
            for tok in range(Vocabulary.N_SPECIAL, len(vocab)):
                label = token_label(db, cid, tok)
                if label in model.index:
                    vecs[vocab.decode(tok)] = model.w_in[model.index[label]]
            out[(t.name, c.name)] = vecs
    return out


# EmbDi ---------------------------------------------------------------------------


@dataclass
class TripartiteGraph:
    labels: list  # node labels
    kinds: np.ndarray  # TOKEN / RID / CID per node
    indptr: np.ndarray  # CSR adjacency
    indices: np.ndarray
    index: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    def degree(self, node: int) -> int:
        return int(self.indptr[node + 1] - self.indptr[node])

    def edges(self) -> set:
        out = set()
        for u in range(self.n_nodes):
            for v in self.neighbors(u):
                out.add((min(u, int(v)), max(u, int(v))))
        return out

    def token_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == TOKEN)

    def counts(self) -> dict:
        kinds = {TOKEN: "token", RID: "rid", CID: "cid"}
        out = {f"{name}_nodes": int(np.sum(self.kinds == k)) for k, name in kinds.items()}
        tr = tc = 0
        for u, v in self.edges():
            pair = {int(self.kinds[u]), int(self.kinds[v])}
            if pair == {TOKEN, RID}:
                tr += 1
            elif pair == {TOKEN, CID}:
                tc += 1
        out["token_rid_edges"] = tr
        out["token_cid_edges"] = tc
        return out


def build_tripartite_graph(db: Database, holdout: Iterable = ()) -> TripartiteGraph:
    """Token nodes link to the row-id and column-id node of every cell they occupy."""
    holdout = set(map(tuple, holdout))
    labels: list[str] = []
    kinds: list[int] = []
    index: dict[str, int] = {}

    def node(label, kind):
        i = index.get(label)
        if i is None:
            i = index[label] = len(labels)
            labels.append(label)
            kinds.append(kind)
        return i

    edges = set()
    for t in db.schema.tables:
        for r in db.rows.get(t.name, []):
            if (t.name, r.row_index) in holdout:
                continue
            cells = _row_tokens(db, t.name, r)
            if not cells:
                continue
            rid = node(f"rid:{t.name}.{r.row_index}", RID)
            for cid_, tok in cells:
                col = db.schema.column_by_id(cid_)
                tnode = node(token_label(db, cid_, tok), TOKEN)
                cnode = node(f"cid:{col.table}.{col.name}", CID)
                edges.add((tnode, rid))
                edges.add((tnode, cnode))
    n = len(labels)
    adj = [[] for _ in range(n)]
    for u, v in sorted(edges):
        adj[u].append(v)
        adj[v].append(u)
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(a) for a in adj])
    indices = np.array([v for a in adj for v in sorted(a)], dtype=np.int64)
    return TripartiteGraph(labels, np.array(kinds, dtype=np.int8), indptr, indices, index)


@dataclass
class WalkConfig:
    walks_per_entity: int = 50
    walk_length: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.walks_per_entity < 1 or self.walk_length < 1:
            raise ValueError("walks_per_entity and walk_length must be >= 1")


FULL_WALKS = WalkConfig(walks_per_entity=1000, walk_length=60)


def random_walk_corpus(graph: TripartiteGraph, config: WalkConfig) -> np.ndarray:
    """Uniform random walks as an int array (n_token_nodes * walks_per_entity, walk_length).

    Rows are grouped by start node (in node order), then by walk number.
    """
    starts = graph.token_nodes()
    if len(starts) == 0:
        raise ValueError("graph has no token nodes")
    deg = np.diff(graph.indptr)
    if np.any(deg[starts] < 1):
        raise ValueError("every token node needs at least one edge")
    rng = np.random.default_rng(config.seed)
    walks = np.empty((len(starts) * config.walks_per_entity, config.walk_length), dtype=np.int64)
    cur = np.repeat(starts, config.walks_per_entity)
    walks[:, 0] = cur
    for step in range(1, config.walk_length):
        d = deg[cur]
        offs = (rng.random(len(cur)) * d).astype(np.int64)
        cur = graph.indices[graph.indptr[cur] + offs]
        walks[:, step] = cur
    return walks


def walks_to_sentences(graph: TripartiteGraph, walks: np.ndarray) -> list[list[str]]:
    labels = graph.labels
    return [[labels[i] for i in w] for w in walks]


def write_walks(graph: TripartiteGraph, walks: np.ndarray, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for w in walks:
            fh.write(" ".join(graph.labels[i] for i in w) + "\n")


def train_embdi(db: Database, walk_config: WalkConfig, sg_config: SkipGramConfig,
                holdout: Iterable = ()) -> SkipGramModel:
    graph = build_tripartite_graph(db, holdout)
    walks = random_walk_corpus(graph, walk_config)
    cfg = SkipGramConfig(**{**sg_config.__dict__, "window": sg_config.window or 5})
    return train_skipgram(walks_to_sentences(graph, walks), cfg)


# ranking -------------------------------------------------------------------------


def baseline_scores(model: SkipGramModel, context: Sequence[str], candidates: Sequence[str]) -> np.ndarray:
    """Cosine between the mean context vector and each candidate (0 for unknown candidates)."""
    known = [model.index[c] for c in context if c in model.index]
    if not known:
        raise EmptyContext("no context token has an embedding")
    q = model.w_in[known].mean(axis=0)
    qn = np.linalg.norm(q)
    scores = np.zeros(len(candidates))
    for i, c in enumerate(candidates):
        j = model.index.get(c)
        if j is None:
            continue
        v = model.w_in[j]
        denom = qn * np.linalg.norm(v)
        scores[i] = float(q @ v / denom) if denom > 0 else 0.0
    return scores


def baseline_rank(model: SkipGramModel, context: Sequence[str], db: Database, target_column: int) -> list[int]:
    """Entity token ids of the target column, best first; ties go to the smaller id."""
    col = db.schema.column_by_id(target_column)
    vocab = db.vocabs[(col.table, col.name)]
    ids = list(range(Vocabulary.N_SPECIAL, len(vocab)))
    if not ids:
        raise ValueError("target column has no entities")
    scores = baseline_scores(model, context, [token_label(db, target_column, t) for t in ids])
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order]

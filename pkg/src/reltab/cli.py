"""``reltab`` command line: ingest, corpus, train, eval, impute, join-predict,
baseline, export and selftest.

Exit codes: 0 success, 1 domain error (bad data, schema, checkpoint...),
2 usage error. Every run writes its artifacts under ``--out`` together with a
``manifest.json`` that records the command, config and seed.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, RelTabError

SEED_ENV = "RELTAB_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# helpers -----------------------------------------------------------------------


class Manifest:
    """Index of everything a run wrote, with content hashes."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed):
        self.out = out_dir
        self.data = {"command": command, "version": __version__, "config": config, "seed": seed,
                     "artifacts": {}}

    def add(self, name: str, path: Path) -> Path:
        path = Path(path)
        rel = path.relative_to(self.out).as_posix()
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
            digest = hashlib.sha256()
            for p in files:
                digest.update(p.relative_to(path).as_posix().encode())
                digest.update(p.read_bytes())
            entry = {"path": rel, "sha256": digest.hexdigest(), "files": [p.name for p in files]}
        else:
            entry = {"path": rel, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
        self.data["artifacts"][name] = entry
        return path

    def write(self) -> Path:
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, required: bool, config_seed=None) -> int | None:
    if args.seed is not None:
        return int(args.seed)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    if required:
        raise UsageError("a seed is required: pass --seed or set RELTAB_SEED")
    return None


def _read_json(path, what: str) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        from .errors import ParseError

        raise ParseError(f"{what} {path} is not valid JSON: {exc}") from exc


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_db(args):
    from .ingest import CleaningRule, load_database
    from .schema import load_schema

    schema = load_schema(args.schema)
    rules = []
    if getattr(args, "rules", None):
        raw = _read_json(args.rules, "cleaning rules")
        try:
            rules = [CleaningRule.from_dict(r) for r in raw]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad cleaning rule in {args.rules}: {exc}") from exc
    return load_database(schema, args.data, rules, getattr(args, "bins", None))


def _train_config(args, seed):
    """Defaults < JSON config file < command-line flags."""
    from .training import TrainConfig

    merged = {}
    if getattr(args, "config", None):
        raw = _read_json(args.config, "config file")
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(raw)
    names = {f.name for f in fields(TrainConfig)}
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            merged[name] = v
    if seed is not None:
        merged["seed"] = seed
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _config_seed(args):
    if getattr(args, "config", None):
        raw = _read_json(args.config, "config file")
        if isinstance(raw, dict):
            return raw.get("seed")
    return None


def split_rows(db, target: str, ratios, seed: int):
    """Per-entity split of the target table (grouped by the target value)."""
    from .corpus import split_grouped

    table, _, column = target.partition(".")
    idx = db.schema.table(table).index_of(column)
    split = split_grouped(db.rows[table], idx, ratios, np.random.default_rng(seed))
    return {"table": table, "train": split.train, "valid": split.valid, "test": split.test}


def _rows_by_index(db, table, indices):
    wanted = set(indices)
    return [r for r in db.rows[table] if r.row_index in wanted]


def _parse_ratios(text):
    try:
        parts = [float(x) for x in str(text).split(",")]
    except ValueError:
        raise UsageError(f"--split must be three comma-separated numbers, got {text!r}")
    if len(parts) != 3 or abs(sum(parts) - 1.0) > 1e-9 or min(parts) < 0:
        raise UsageError("--split must be three non-negative numbers summing to 1")
    return parts


@contextlib.contextmanager
def _threads(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


# subcommands ---------------------------------------------------------------------


def cmd_ingest(args) -> int:
    from .ingest import dump_vocabularies, write_table_csv
    from .schema import dump_schema, validate_data_against_schema

    out = _out_dir(args)
    db = _load_db(args)
    man = Manifest(out, "ingest", {"schema": str(args.schema), "data": str(args.data),
                                   "rules": args.rules, "bins": args.bins}, None)
    dump_schema(db.schema, out / "schema.json")
    man.add("schema", out / "schema.json")
    dump_vocabularies(db.vocabs, out / "vocab.jsonl")
    man.add("vocab", out / "vocab.jsonl")
    report = validate_data_against_schema(db.schema, db.rows)
    _write_json(out / "validation.json", {
        "connected": report.connected,
        "issues": [vars(i) | {"rows": list(i.rows)} for i in report.issues],
        "rows": {t: len(r) for t, r in db.rows.items()},
        "vocab_sizes": {f"{t}.{c}": v.n_entities for (t, c), v in sorted(db.vocabs.items())},
    })
    man.add("validation", out / "validation.json")
    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    for t in db.schema.tables:
        write_table_csv(db.schema, t.name, db.rows[t.name], tables / f"{t.name}.csv")
    man.add("tables", tables)
    man.write()
    print(f"ingested {db.n_rows()} rows from {len(db.schema.tables)} tables; "
          f"{len(report)} validation issue(s)")
    return 0


def cmd_corpus(args) -> int:
    from .corpus import (apply_mask, maskable_positions, materialize_join_sentences, sample_negatives,
                         write_corpus)
    from .ingest import dump_vocabularies
    from .schema import join_compatible_pairs
    from .training import Task, _same_space_columns, default_maskable, resolve_fk, strip_second, task_pairs

    seed = _seed(args, required=True)
    out = _out_dir(args)
    db = _load_db(args)
    rng = np.random.default_rng(seed)
    cfg = {"schema": str(args.schema), "data": str(args.data), "target": args.target,
           "join": args.join, "neg_samples": args.neg_samples, "split": args.split}
    man = Manifest(out, "corpus", cfg, seed)
    dump_vocabularies(db.vocabs, out / "vocab.jsonl")
    man.add("vocab", out / "vocab.jsonl")

    holdout = set()
    if args.target:
        split = split_rows(db, args.target, _parse_ratios(args.split), seed)
        _write_json(out / "split.json", split)
        man.add("split", out / "split.json")
        holdout = {(split["table"], i) for i in split["valid"] + split["test"]}

    maskable = default_maskable(db, mask_keys=False)
    pretrain = []
    for fk in join_compatible_pairs(db.schema):
        a = [r for r in db.rows[fk.from_table] if (fk.from_table, r.row_index) not in holdout]
        b = [r for r in db.rows[fk.to_table] if (fk.to_table, r.row_index) not in holdout]
        for p in materialize_join_sentences(fk, a, b, db):
            s = p.as_sentence()
            if maskable_positions(s, maskable):
                pretrain.append(apply_mask(s, rng, maskable))
    if not join_compatible_pairs(db.schema):
        for t in db.schema.tables:
            for s in db.sentences(t.name):
                if (t.name, s.source[1]) not in holdout and maskable_positions(s, maskable):
                    pretrain.append(apply_mask(s, rng, maskable))
    n = write_corpus(pretrain, out / "corpus_pretrain.jsonl")
    man.add("corpus_pretrain", out / "corpus_pretrain.jsonl")
    msg = f"{n} pre-training instances"

    if args.target:
        table, _, column = args.target.partition(".")
        fk = resolve_fk(db, args.join) if args.join else db.schema.foreign_key_of(table, column)
        task = Task((table, column), fk)
        train_rows = [r for r in db.rows[table] if (table, r.row_index) not in holdout]
        tcol = db.schema.column_id(table, column)
        inst = []
        if fk is not None:
            positives = task_pairs(db, task, train_rows)
            leak = _same_space_columns(db, tcol, exclude=tcol)
            for p in positives:
                inst.append(apply_mask(p.as_sentence(), rng, {tcol}))
            negs = sample_negatives(positives, args.neg_samples, rng, db.sentences(task.partner_table()))
            inst.extend(strip_second(negs, leak))
        else:
            for s in db.sentences(table):
                if (table, s.source[1]) not in holdout:
                    inst.append(apply_mask(s, rng, {tcol}))
        m = write_corpus(inst, out / "corpus_finetune.jsonl")
        man.add("corpus_finetune", out / "corpus_finetune.jsonl")
        msg += f", {m} fine-tuning instances"
    man.write()
    print(msg)
    return 0


def _evaluate_trained(model, db, config, split, k, pool_size, seed, tie_break="token_id"):
    from .evaluation import evaluate_autocompletion, evaluate_join_prediction
    from .training import resolve_fk, resolve_task
    from .schema import join_compatible_pairs

    if config.variant == "A":
        task = resolve_task(db, config)
        if task is None:
            return None
        rows = _rows_by_index(db, task.table, split["test"]) if split else None
        return evaluate_autocompletion(model, db, task, rows, k=k, model_name="relbert-a", seed=seed,
                                       tie_break=tie_break)
    fk = resolve_fk(db, config.join) or join_compatible_pairs(db.schema)[0]
    return evaluate_join_prediction(model, db, fk, k=k, pool_size=pool_size, seed=seed,
                                    model_name="relbert-j", tie_break=tie_break)


def cmd_train(args) -> int:
    from .encoder import save_checkpoint
    from .training import train

    seed = _seed(args, required=True, config_seed=_config_seed(args))
    config = _train_config(args, seed)
    out = _out_dir(args)
    db = _load_db(args)
    ratios = _parse_ratios(args.split)
    man = Manifest(out, "train", config.to_dict(), seed)
    split = None
    holdout = ()
    if config.variant == "A" and config.target:
        split = split_rows(db, config.target, ratios, seed)
        _write_json(out / "split.json", split)
        man.add("split", out / "split.json")
        holdout = [(split["table"], i) for i in split["valid"] + split["test"]]
    log = out / "train_log.jsonl"

    def progress(rep):
        if not args.quiet:
            print(f"[{rep.stage} {rep.epoch}] l_mlm={rep.l_mlm:.4f} l_nsp={rep.l_nsp:.4f}", file=sys.stderr)

    model, _ = train(db, config, holdout=holdout, log_path=log, callback=progress)
    man.add("train_log", log)
    extra = {"train_config": config.to_dict(), "seed": seed, "split_ratios": ratios,
             "data_rows": {t: len(r) for t, r in db.rows.items()}}
    ckpt = save_checkpoint(model, out / "checkpoint", db.vocabs, extra)
    man.add("checkpoint", ckpt)
    report = _evaluate_trained(model, db, config, split, args.k, args.pool_size, seed)
    if report is not None:
        report.extra["config"] = config.to_dict()
        report.write(out / "metrics.json")
        man.add("metrics", out / "metrics.json")
        print(report.to_json())
    if not args.no_export:
        _export_artifacts(model, db, config, out, man)
    man.write()
    return 0


def _load_trained(args, db):
    from .encoder import load_checkpoint, load_meta
    from .training import TrainConfig

    meta = load_meta(args.checkpoint)
    model = load_checkpoint(args.checkpoint, db.schema)
    extra = meta.get("extra", {})
    for (t, c), v in db.vocabs.items():
        want = meta.get("vocab_hashes", {}).get(f"{t}.{c}")
        if want is not None and want != v.digest():
            raise ConfigError(f"vocabulary of {t}.{c} differs from the one the checkpoint was trained on")
    config = TrainConfig.from_dict(extra["train_config"]) if "train_config" in extra else None
    return model, config, extra


def cmd_eval(args) -> int:
    from .evaluation import evaluate_autocompletion, evaluate_join_prediction
    from .training import resolve_fk, resolve_task
    from .schema import join_compatible_pairs

    out = _out_dir(args)
    db = _load_db(args)
    model, config, extra = _load_trained(args, db)
    seed = _seed(args, required=False, config_seed=extra.get("seed"))
    if config is None:
        raise ConfigError("checkpoint carries no training config; cannot infer the task")
    if args.target:
        config.target = args.target
    if args.join:
        config.join = args.join
    task_kind = args.task or ("autocomplete" if config.variant == "A" else "join")
    man = Manifest(out, "eval", {"checkpoint": str(args.checkpoint), "task": task_kind, "k": args.k,
                                 "pool_size": args.pool_size, "part": args.part,
                                 "train_config": config.to_dict()}, seed)
    if task_kind == "autocomplete":
        task = resolve_task(db, config)
        if task is None:
            raise ConfigError("no target column: pass --target table.column")
        rows = None
        if args.part != "all":
            ratios = extra.get("split_ratios", _parse_ratios(args.split))
            split = split_rows(db, f"{task.table}.{task.target[1]}", ratios, seed)
            rows = _rows_by_index(db, task.table, split[args.part])
        report = evaluate_autocompletion(model, db, task, rows, k=args.k, seed=seed,
                                         model_name=f"relbert-{config.variant.lower()}",
                                         tie_break=args.tie_break)
    else:
        fk = resolve_fk(db, config.join) or join_compatible_pairs(db.schema)[0]
        report = evaluate_join_prediction(model, db, fk, k=args.k, pool_size=args.pool_size,
                                          seed=seed or 0, model_name=f"relbert-{config.variant.lower()}",
                                          tie_break=args.tie_break)
    report.extra["config"] = config.to_dict()
    report.write(out / "metrics.json")
    man.add("metrics", out / "metrics.json")
    man.write()
    print(report.to_json())
    return 0


def _row_from_json(db, table, obj, row_index=-1):
    from .ingest import NULL, RowRecord

    tdef = db.schema.table(table)
    if not isinstance(obj, dict):
        raise ConfigError("row file must map column names to values")
    unknown = set(obj) - set(tdef.column_names)
    if unknown:
        raise ConfigError(f"unknown column(s) for {table!r}: {sorted(unknown)}")
    cells = tuple(NULL if obj.get(c) in (None, "") else str(obj.get(c)) for c in tdef.column_names)
    return RowRecord(table, cells, row_index)


def cmd_impute(args) -> int:
    from . import autograd as ag
    from .corpus import SentencePair, mask_at
    from .ingest import Vocabulary, encode_row
    from .training import _same_space_columns

    db = _load_db(args)
    model, config, extra = _load_trained(args, db)
    raw = _read_json(args.row_file, "row file")
    row_obj, partner_obj = (raw.get("row"), raw.get("partner")) if "row" in raw else (raw, None)
    rec = _row_from_json(db, args.table, row_obj)
    tcol = db.schema.column_id(args.table, args.column)
    sent = encode_row(rec, db.vocabs, db.schema)
    if partner_obj is not None:
        ptable = partner_obj.pop("__table__", None)
        if ptable is None:
            raise ConfigError("partner row needs a '__table__' entry naming its table")
        prec = _row_from_json(db, ptable, partner_obj)
        second = encode_row(prec, db.vocabs, db.schema).without_columns(_same_space_columns(db, tcol, exclude=tcol))
        sent = SentencePair(sent, second, 1, (None, None)).as_sentence()
    pos = [i for i, (_, c) in enumerate(sent.tokens) if c == tcol][0]
    masked = mask_at(sent, pos)
    with ag.no_grad():
        O, _, _ = model.forward([masked.base])
        logits = np.asarray(model.masked_logits(O, np.array([0]), np.array([pos]), tcol).data[0], dtype=np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[: args.topk]
    vocab = db.vocab_by_id(tcol)
    result = {
        "table": args.table, "column": args.column, "topk": args.topk,
        "candidates": [
            {"rank": r + 1, "entity": vocab.decode(i + Vocabulary.N_SPECIAL), "probability": float(probs[i])}
            for r, i in enumerate(order)
        ],
        "seed": extra.get("seed"), "config": extra.get("train_config"),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        out = _out_dir(args)
        man = Manifest(out, "impute", {"checkpoint": str(args.checkpoint), "table": args.table,
                                       "column": args.column, "topk": args.topk}, extra.get("seed"))
        (out / "impute.json").write_text(text + "\n", encoding="utf-8")
        man.add("impute", out / "impute.json")
        man.write()
    print(text)
    return 0


def cmd_join_predict(args) -> int:
    from . import autograd as ag
    from .corpus import SentencePair
    from .ingest import encode_row
    from .schema import join_compatible_pairs
    from .training import join_orientation, resolve_fk
    from scipy.special import expit

    db = _load_db(args)
    model, config, extra = _load_trained(args, db)
    fk = resolve_fk(db, args.join or (config.join if config else None)) or join_compatible_pairs(db.schema)[0]
    first, second = join_orientation(fk)
    rec = _row_from_json(db, first, _read_json(args.row_file, "row file"))
    s1 = encode_row(rec, db.vocabs, db.schema)
    cands = db.sentences(second)
    scores = []
    with ag.no_grad():
        for i in range(0, len(cands), 128):
            flat = [SentencePair(s1, c, 1, (None, None)).as_sentence() for c in cands[i : i + 128]]
            O, _, _ = model.forward(flat)
            scores.extend(np.asarray(model.nsp_logits(O).data, dtype=np.float64).tolist())
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[: args.topk]
    cols = db.schema.table(second).column_names
    result = {
        "join": str(fk), "query_table": first, "candidate_table": second,
        "candidates": [
            {"rank": r + 1, "row_index": db.rows[second][i].row_index,
             "row": dict(zip(cols, db.rows[second][i].cells)),
             "score": scores[i], "probability": float(expit(scores[i]))}
            for r, i in enumerate(order)
        ],
        "seed": extra.get("seed"),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        out = _out_dir(args)
        man = Manifest(out, "join-predict", {"checkpoint": str(args.checkpoint), "join": str(fk),
                                             "topk": args.topk}, extra.get("seed"))
        (out / "join_predict.json").write_text(text + "\n", encoding="utf-8")
        man.add("join_predict", out / "join_predict.json")
        man.write()
    print(text)
    return 0


def cmd_baseline(args) -> int:
    from .baselines import (FULL_WALKS, SkipGramConfig, WalkConfig, build_tripartite_graph,
                            random_walk_corpus, table2vec_corpus, train_skipgram, walks_to_sentences,
                            write_walks)
    from .evaluation import evaluate_autocompletion, export_skipgram_embeddings
    from .training import Task

    seed = _seed(args, required=True)
    out = _out_dir(args)
    db = _load_db(args)
    cfg = {"method": args.method, "dim": args.dim, "epochs": args.epochs, "negatives": args.negatives,
           "target": args.target, "split": args.split}
    holdout, split = set(), None
    if args.target:
        split = split_rows(db, args.target, _parse_ratios(args.split), seed)
        holdout = {(split["table"], i) for i in split["valid"] + split["test"]}
    if args.method == "table2vec":
        sg_cfg = SkipGramConfig(dim=args.dim, epochs=args.epochs, window=None, negatives=args.negatives, seed=seed)
        corpus = table2vec_corpus(db, holdout)
    else:
        walk_cfg = FULL_WALKS if args.full_walks else WalkConfig(args.walks, args.walk_length)
        walk_cfg = WalkConfig(walk_cfg.walks_per_entity, walk_cfg.walk_length, seed)
        cfg.update(walks_per_entity=walk_cfg.walks_per_entity, walk_length=walk_cfg.walk_length)
        graph = build_tripartite_graph(db, holdout)
        walks = random_walk_corpus(graph, walk_cfg)
        sg_cfg = SkipGramConfig(dim=args.dim, epochs=args.epochs, window=args.window, negatives=args.negatives,
                                seed=seed)
        corpus = walks_to_sentences(graph, walks)
    cfg["window"] = sg_cfg.window
    man = Manifest(out, "baseline", cfg, seed)
    if args.method == "embdi":
        write_walks(graph, walks, out / "walks.txt")
        man.add("walks", out / "walks.txt")
        _write_json(out / "graph.json", graph.counts())
        man.add("graph", out / "graph.json")
    model = train_skipgram(corpus, sg_cfg)
    export_skipgram_embeddings(model, out / "embeddings.csv")
    man.add("embeddings", out / "embeddings.csv")
    if args.target:
        _write_json(out / "split.json", split)
        man.add("split", out / "split.json")
        table, _, column = args.target.partition(".")
        task = Task((table, column), db.schema.foreign_key_of(table, column) if args.with_join else None)
        report = evaluate_autocompletion(model, db, task, _rows_by_index(db, table, split["test"]), k=args.k,
                                         model_name=args.method, seed=seed)
        report.extra["config"] = cfg
        report.write(out / "metrics.json")
        man.add("metrics", out / "metrics.json")
        print(report.to_json())
    man.write()
    return 0


def _export_sentence(db, config, table=None, row=0):
    """The sentence whose attention gets exported: a task instance if possible, else a plain row."""
    from .evaluation import autocompletion_instances
    from .ingest import encode_row
    from .training import resolve_task

    task = resolve_task(db, config) if config is not None else None
    if table is not None:
        rows = [r for r in db.rows[table] if r.row_index == row]
        if not rows:
            raise ConfigError(f"no row {row} in table {table!r}")
        if task is not None and task.table == table:
            inst = autocompletion_instances(db, task, rows)
            if inst:
                return inst[0].sentence
        return encode_row(rows[0], db.vocabs, db.schema)
    if task is not None:
        inst = autocompletion_instances(db, task)
        if inst:
            return inst[0].sentence
    for t in db.schema.tables:
        if db.rows[t.name]:
            return db.sentences(t.name)[0]
    raise ConfigError("database has no rows to export attention for")


def _export_artifacts(model, db, config, out: Path, man: Manifest, table=None, row=0) -> tuple[int, int]:
    from .evaluation import export_attention, export_embeddings

    att_dir = out / "attention"
    paths = export_attention(model, _export_sentence(db, config, table, row), att_dir)
    man.add("attention", att_dir)
    n = export_embeddings(model, db, out / "embeddings.csv")
    man.add("embeddings", out / "embeddings.csv")
    return len(paths), n


def cmd_export(args) -> int:
    out = _out_dir(args)
    db = _load_db(args)
    model, config, extra = _load_trained(args, db)
    man = Manifest(out, "export", {"checkpoint": str(args.checkpoint), "table": args.table, "row": args.row,
                                   "train_config": extra.get("train_config")}, extra.get("seed"))
    n_att, n_emb = _export_artifacts(model, db, config, out, man, args.table, args.row)
    man.write()
    print(f"wrote {n_att} attention matrices and {n_emb} embeddings")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(encoder_max_coords=args.max_coords)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# parser ----------------------------------------------------------------------------


def _data_flags(p, required=True):
    p.add_argument("--schema", required=required, help="schema JSON file")
    p.add_argument("--data", required=required, help="directory holding <table>.csv files")
    p.add_argument("--rules", help="JSON list of cleaning rules")
    p.add_argument("--bins", type=int, help="equal-width bin numeric-hinted columns into N buckets")


def _common_flags(p):
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")
    p.add_argument("--threads", type=int, help="cap on BLAS/worker threads (1 = reproducible)")
    p.add_argument("--precision", choices=("f32", "f64"), help="floating point precision")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reltab", description="Relational table embeddings with a position-free encoder.")
    parser.add_argument("--version", action="version", version=f"reltab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="load CSVs, clean, build vocabularies, validate")
    _data_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_ingest, need_out=True)

    p = sub.add_parser("corpus", help="write masked / paired training corpora as JSON lines")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--target", help="table.column predicted during fine-tuning")
    p.add_argument("--join", help="from_table.from_column of the fine-tuning join")
    p.add_argument("--neg-samples", dest="neg_samples", type=int, default=1)
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_corpus, need_out=True)

    p = sub.add_parser("train", help="train RelBert-A or RelBert-J and evaluate on the test split")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--config", help="JSON file with training options")
    p.add_argument("--variant", choices=("a", "j", "A", "J"))
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--heads", dest="n_heads", type=int)
    p.add_argument("--ff-hidden", dest="ff_hidden", type=int)
    p.add_argument("--activation", choices=("gelu", "relu"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--neg-samples", dest="neg_samples", type=int)
    p.add_argument("--target")
    p.add_argument("--join")
    p.add_argument("--no-nsp", dest="use_nsp", action="store_const", const=False)
    p.add_argument("--no-w2v", dest="w2v_init", action="store_const", const=False)
    p.add_argument("--w2v-epochs", dest="w2v_epochs", type=int)
    p.add_argument("--mask-keys", dest="mask_keys", action="store_const", const=True)
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--no-export", dest="no_export", action="store_true",
                   help="skip writing attention CSVs and embeddings")
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("autocomplete", "join"))
    p.add_argument("--target")
    p.add_argument("--join")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--part", choices=("test", "valid", "train", "all"), default="test")
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--tie-break", dest="tie_break", choices=("token_id", "optimistic", "pessimistic"),
                   default="token_id")
    p.set_defaults(func=cmd_eval, need_out=True)

    p = sub.add_parser("impute", help="rank candidates for one missing cell")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--row-file", dest="row_file", required=True,
                   help="JSON object column -> value (or {'row': ..., 'partner': {'__table__': ...}})")
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(func=cmd_impute, need_out=False)

    p = sub.add_parser("join-predict", help="rank join partners for one row")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--join")
    p.add_argument("--row-file", dest="row_file", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(func=cmd_join_predict, need_out=False)

    p = sub.add_parser("baseline", help="train Table2Vec or EmbDi and evaluate")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--method", choices=("table2vec", "embdi"), required=True)
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--window", type=int, default=5, help="skip-gram window for walks")
    p.add_argument("--walks", type=int, default=50, help="walks per entity")
    p.add_argument("--walk-length", dest="walk_length", type=int, default=20)
    p.add_argument("--full-walks", dest="full_walks", action="store_true",
                   help="use 1000 walks of length 60 per entity")
    p.add_argument("--target")
    p.add_argument("--with-join", dest="with_join", action="store_true",
                   help="score with the joined partner row as extra context")
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_baseline, need_out=True)

    p = sub.add_parser("export", help="write attention CSVs and embedding tables")
    _data_flags(p)
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table")
    p.add_argument("--row", type=int, default=0)
    p.set_defaults(func=cmd_export, need_out=True)

    p = sub.add_parser("selftest", help="gradient checks and metric oracle")
    _common_flags(p)
    p.add_argument("--max-coords", dest="max_coords", type=int,
                   help="sample this many coordinates per parameter in the encoder check")
    p.set_defaults(func=cmd_selftest, need_out=False)
    return parser


def _precision_ctx(precision):
    from . import autograd as ag

    if precision is None:
        return contextlib.nullcontext()
    return ag.default_dtype(np.float32 if precision == "f32" else np.float64)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("reltab: error: a subcommand is required")
        if args.need_out and not args.out:
            raise UsageError(f"reltab {args.command}: error: --out is required")
        if getattr(args, "variant", None):
            args.variant = args.variant.upper()
        with _threads(args.threads), _precision_ctx(args.precision):
            return int(args.func(args))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (RelTabError, OSError, KeyError, ValueError) as exc:
        print(f"reltab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    sys.exit(main())

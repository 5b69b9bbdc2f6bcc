"""Entity embeddings for relational databases: a position-free transformer
over table rows trained with masked-cell prediction and join prediction,
word2vec-style baselines, and ranking evaluation."""

__version__ = "0.1.0"

from .baselines import (
    SkipGramConfig,
    SkipGramModel,
    TripartiteGraph,
    WalkConfig,
    baseline_rank,
    build_tripartite_graph,
    random_walk_corpus,
    table2vec_corpus,
    train_embdi,
    train_skipgram,
    train_table2vec,
)
from .encoder import ModelConfig, TableEncoderModel, load_checkpoint, save_checkpoint
from .evaluation import (
    MetricsReport,
    RankingResult,
    compute_metrics,
    evaluate_autocompletion,
    evaluate_join_prediction,
    export_attention,
    export_embeddings,
    rank_candidates,
    random_mrr,
)
from .ingest import Database, Vocabulary, database_from_rows, load_database
from .schema import DatabaseSchema, build_schema, join_compatible_pairs, load_schema
from .training import Task, TrainConfig, train, train_relbert_a, train_relbert_j

__all__ = [
    "__version__", "SkipGramConfig", "SkipGramModel", "TripartiteGraph", "WalkConfig", "baseline_rank",
    "build_tripartite_graph", "random_walk_corpus", "table2vec_corpus", "train_embdi", "train_skipgram",
    "train_table2vec", "ModelConfig", "TableEncoderModel", "load_checkpoint", "save_checkpoint",
    "MetricsReport", "RankingResult", "compute_metrics", "evaluate_autocompletion",
    "evaluate_join_prediction", "export_attention", "export_embeddings", "rank_candidates", "random_mrr",
    "Database", "Vocabulary", "database_from_rows", "load_database", "DatabaseSchema", "build_schema",
    "join_compatible_pairs", "load_schema", "Task", "TrainConfig", "train", "train_relbert_a",
    "train_relbert_j",
]

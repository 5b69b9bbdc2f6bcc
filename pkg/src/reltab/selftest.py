"""Built-in consistency checks: finite-difference gradients of every
primitive and of a small encoder, and the ranking-metric oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ops

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _weighted(fn: Callable, shape_rng_seed: int = 0):
    """Reduce ``fn``'s output to a scalar with fixed random weights (avoids symmetric zeros)."""

    def f(*xs):
        out = fn(*xs)
        w = np.random.default_rng(shape_rng_seed).normal(size=out.shape)
        return ops.sum(ops.mul(out, ag.Tensor(w)))

    return f


def primitive_cases(rng: np.random.Generator | None = None) -> dict:
    """name -> (scalar function, input arrays, indices of differentiable inputs)."""
    rng = rng or np.random.default_rng(0)
    n = rng.normal
    mask = np.array([[True, True, False, True], [True, False, True, True], [True, True, True, True]])
    away = n(size=(3, 4))
    away = np.where(np.abs(away) < 0.1, away + 0.3, away)  # keep relu inputs off the kink
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    return {
        "add": (_weighted(ops.add), [n(size=(3, 4)), n(size=(4,))], None),
        "sub": (_weighted(ops.sub), [n(size=(3, 4)), n(size=(3, 1))], None),
        "mul": (_weighted(ops.mul), [n(size=(3, 4)), n(size=(3, 4))], None),
        "scale": (_weighted(lambda a: ops.scale(a, -1.7)), [n(size=(3, 4))], None),
        "matmul": (_weighted(ops.matmul), [n(size=(2, 3, 4)), n(size=(4, 5))], None),
        "transpose": (_weighted(ops.transpose), [n(size=(2, 3, 4))], None),
        "reshape": (_weighted(lambda a: ops.reshape(a, (4, 3))), [n(size=(3, 4))], None),
        "concat": (_weighted(lambda a, b: ops.concat([a, b], axis=1)), [n(size=(2, 3)), n(size=(2, 2))], None),
        "slice": (_weighted(lambda a: ops.slice(a, (np.array([0, 2, 0]), np.array([1, 3, 1])))), [n(size=(3, 4))], None),
        "relu": (_weighted(ops.relu), [away], None),
        "gelu": (_weighted(ops.gelu), [n(size=(3, 4))], None),
        "sigmoid": (_weighted(ops.sigmoid), [n(size=(3, 4))], None),
        "log_sigmoid": (_weighted(ops.log_sigmoid), [3 * n(size=(3, 4))], None),
        "layer_norm": (_weighted(ops.layer_norm), [3 * n(size=(3, 5))], None),
        "row_softmax": (_weighted(lambda a: ops.row_softmax(a, mask)), [n(size=(3, 4))], None),
        "embedding_lookup": (_weighted(lambda t: ops.embedding_lookup(t, ids)), [n(size=(4, 3))], None),
        "dropout": (
            _weighted(lambda a: ops.dropout(a, 0.3, np.random.default_rng(7), training=True)),
            [n(size=(3, 4))], None,
        ),
        "sum": (lambda a: ops.sum(ops.mul(a, a)), [n(size=(3, 4))], None),
        "mean": (lambda a: ops.mean(ops.mul(a, a)), [n(size=(3, 4))], None),
        "cross_entropy": (
            lambda a: ops.sum(ops.cross_entropy(a, np.array([1, 0, 3]))), [n(size=(3, 4))], None,
        ),
    }


def check_primitives(tol: float = GRAD_TOL, h: float = GRAD_STEP) -> list[CheckResult]:
    out = []
    with ag.default_dtype(np.float64):
        for name, (f, point, wrt) in primitive_cases().items():
            rep = ag.grad_check(f, point, h=h, tol=tol, wrt=wrt)
            out.append(CheckResult(f"grad:{name}", rep.passed, f"max rel err {rep.max_rel_error:.2e}"))
    return out


def tiny_encoder_setup(seed: int = 0, d_model: int = 8, n_layers: int = 2, n_heads: int = 2):
    """A two-table toy database and a small f64 encoder over it."""
    from .encoder import ModelConfig, TableEncoderModel
    from .synthetic import unique_join

    db = unique_join(n_keys=6, n_attr=3, seed=seed).database()
    cfg = ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads, ff_hidden=2 * d_model)
    model = TableEncoderModel.from_database(db, cfg, seed=seed, dtype=np.float64)
    # non-trivial biases and gains so their gradients are exercised
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters().items():
        if name.endswith(("bias", "b1", "b2", "bq", "bk", "bv", "bo", "gain")) or name == "nsp.b":
            p.data += 0.1 * rng.normal(size=p.shape)
    return db, model


def encoder_losses(db, model, seed: int = 0) -> dict:
    """Closures computing L_mlm and L_nsp on a fixed batch."""
    from .corpus import apply_mask, materialize_join_sentences, sample_negatives
    from .training import mlm_loss, nsp_loss

    rng = np.random.default_rng(seed)
    fk = db.schema.foreign_keys[0]
    pairs = materialize_join_sentences(fk, db.rows[fk.to_table], db.rows[fk.from_table], db)[:4]
    masked = [apply_mask(p.as_sentence(), rng) for p in pairs]
    nsp_batch = sample_negatives(pairs, 1, rng, db.sentences(fk.from_table))
    return {
        "mlm": lambda: mlm_loss(masked, model),
        "nsp": lambda: nsp_loss(nsp_batch, model),
    }


def check_encoder(tol: float = GRAD_TOL, h: float = GRAD_STEP, max_coords: int | None = None) -> list[CheckResult]:
    out = []
    with ag.default_dtype(np.float64):
        db, model = tiny_encoder_setup()
        for name, fn in encoder_losses(db, model).items():
            rep = ag.grad_check_params(fn, model.parameters(), h=h, tol=tol, max_coords=max_coords)
            out.append(CheckResult(f"grad:encoder:{name}", rep.passed,
                                   f"max rel err {rep.max_rel_error:.2e} over {rep.n_coordinates} coords"))
    return out


def brute_force_metrics(score_rows, true_ids, k: int):
    """Full-sort reference: order candidates by (-score, id), read off each true id's position."""
    ranks = []
    for scores, t in zip(score_rows, true_ids):
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        ranks.append(order.index(t) + 1)
    ranks = np.array(ranks, dtype=np.float64)
    return ranks, float(np.mean(ranks <= k)), float(np.mean(ranks)), float(np.mean(1.0 / ranks))


def check_metric_oracle(n_instances: int = 1000, seed: int = 0, k: int = 10) -> list[CheckResult]:
    from .evaluation import compute_metrics, metrics_consistent, rank_candidates

    rng = np.random.default_rng(seed)
    mismatches = 0
    jensen_ok = True
    for trial in range(n_instances):
        pool = int(rng.integers(1, 40))
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, 6, size=pool).astype(float)
        true_id = int(rng.integers(pool))
        res = rank_candidates(scores, true_id)
        ranks, hits, mr, mrr = brute_force_metrics([scores], [true_id], k)
        rep = compute_metrics([res], k)
        if res.rank != ranks[0] or (rep.hits_at_k, rep.mean_rank, rep.mrr) != (hits, mr, mrr):
            mismatches += 1
        jensen_ok &= rep.mrr >= 1.0 / rep.mean_rank
    # one aggregate report over a batch of instances as well
    rows = [rng.normal(size=50) for _ in range(n_instances)]
    truth = [int(rng.integers(50)) for _ in range(n_instances)]
    rep = compute_metrics([rank_candidates(s, t) for s, t in zip(rows, truth)], k)
    _, hits, mr, mrr = brute_force_metrics(rows, truth, k)
    agg_ok = (rep.hits_at_k, rep.mean_rank, rep.mrr) == (hits, mr, mrr)
    jensen_ok &= rep.mrr >= 1.0 / rep.mean_rank
    published_row = metrics_consistent(0.801, 284.25, 0.656)
    return [
        CheckResult("metrics:oracle", mismatches == 0 and agg_ok,
                    f"{mismatches} mismatches over {n_instances} instances, aggregate equal={agg_ok}"),
        CheckResult("metrics:jensen", bool(jensen_ok), "MRR >= 1/MR on every report"),
        CheckResult("metrics:published_row", published_row, "(0.801, 284.25, 0.656) is a feasible triple"),
    ]


def run_all(encoder_max_coords: int | None = None) -> list[CheckResult]:
    return check_primitives() + check_encoder(max_coords=encoder_max_coords) + check_metric_oracle()

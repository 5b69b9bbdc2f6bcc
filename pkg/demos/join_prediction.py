"""Predict which child row joins a given parent row.

parent(pid, pa) and child(cid, pid, ca) are linked one-to-one and their
attributes are noise, so only the key connects them. RelBert-J is trained
with 1, 5 and 10 negative samples per positive pair; more negatives give a
sharper ranking.

    python demos/join_prediction.py
"""

import time

from reltab.evaluation import evaluate_join_prediction
from reltab.synthetic import unique_join
from reltab.training import TrainConfig, train_relbert_j


def main(seed: int = 0) -> None:
    db = unique_join(n_keys=100, seed=seed).database()
    fk = db.schema.foreign_keys[0]
    print(f"join {fk}: {len(db.rows['parent'])} parents, {len(db.rows['child'])} candidate children")
    print(f"{'negatives':>10}{'Hits@10':>9}{'MR':>8}{'MRR':>8}{'time':>7}")
    for k in (1, 5, 10):
        config = TrainConfig(variant="J", d_model=32, n_layers=2, n_heads=2, ff_hidden=64, lr=1e-3,
                             pretrain_epochs=10, finetune_epochs=200, neg_samples=k, join="child.pid", seed=seed)
        t0 = time.perf_counter()
        model, _ = train_relbert_j(db, config)
        rep = evaluate_join_prediction(model, db, fk, k=10, seed=seed)
        print(f"{k:>10}{rep.hits_at_k:>9.2f}{rep.mean_rank:>8.2f}{rep.mrr:>8.3f}{time.perf_counter() - t0:>6.0f}s")


if __name__ == "__main__":
    main()

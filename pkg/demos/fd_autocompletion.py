"""Fill in a missing cell that is a function of the rest of its row.

The table fd(x, y, z) has z determined by (x, y). One row per z value is
held out; RelBert-A learns the mapping from the remaining rows and ranks
every z candidate for each held-out row. Table2Vec on the same split is
shown for comparison.

    python demos/fd_autocompletion.py
"""

import time

from reltab.baselines import SkipGramConfig, train_table2vec
from reltab.evaluation import evaluate_autocompletion, random_mrr
from reltab.synthetic import fd_split, functional_dependency
from reltab.training import Task, TrainConfig, train_relbert_a


def main(seed: int = 0) -> None:
    db = functional_dependency(n_rows=500, n_x=10, n_y=10, seed=seed).database()
    train_rows, test_rows = fd_split(db, seed=seed)
    holdout = [("fd", r.row_index) for r in test_rows]
    print(f"{len(train_rows)} training rows, {len(test_rows)} held-out rows, "
          f"{db.vocab('fd', 'z').n_entities} candidates for z")

    config = TrainConfig(variant="A", d_model=32, n_layers=2, n_heads=2, ff_hidden=64, lr=1e-3,
                         pretrain_epochs=50, finetune_epochs=150, target="fd.z", use_nsp=False, seed=seed)
    t0 = time.perf_counter()
    model, reports = train_relbert_a(db, config, holdout=holdout)
    print(f"RelBert-A trained in {time.perf_counter() - t0:.0f}s; "
          f"loss {reports[0].l_total:.3f} -> {reports[-1].l_total:.3f}")

    task = Task(("fd", "z"))
    rel = evaluate_autocompletion(model, db, task, rows=test_rows, k=1, model_name="relbert-a")
    sg = train_table2vec(db, SkipGramConfig(dim=300, epochs=20, seed=seed), holdout=holdout)
    t2v = evaluate_autocompletion(sg, db, task, rows=test_rows, k=1, model_name="table2vec")
    print(f"{'model':<12}{'Hits@1':>8}{'MR':>8}{'MRR':>8}")
    for rep in (rel, t2v):
        print(f"{rep.model:<12}{rep.hits_at_k:>8.3f}{rep.mean_rank:>8.2f}{rep.mrr:>8.3f}")
    print(f"{'random':<12}{'':>8}{'':>8}{random_mrr(100):>8.3f}")


if __name__ == "__main__":
    main()

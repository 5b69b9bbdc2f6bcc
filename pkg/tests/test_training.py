import math

import numpy as np
import pytest

from reltab import autograd as ag
from reltab.corpus import SentencePair, apply_mask, materialize_join_sentences, sample_negatives
from reltab.encoder import TableEncoderModel
from reltab.errors import ConfigError, ShapeError
from reltab.ingest import database_from_rows
from reltab.schema import build_schema
from reltab.synthetic import functional_dependency, unique_join
from reltab.training import (
    Adam,
    OptimizerState,
    Task,
    TrainConfig,
    default_maskable,
    mlm_loss,
    nsp_loss,
    nsp_loss_from_scores,
    nsp_scores,
    optimizer_step,
    resolve_task,
    task_pairs,
    train,
    train_relbert_a,
    train_relbert_j,
)

TINY = dict(d_model=16, n_layers=1, n_heads=2, ff_hidden=32, lr=1e-3, w2v_init=False)


def _pairs_with_zero_head(db, model, k, rng):
    model.nsp_w.data[:] = 0
    model.nsp_b.data[:] = 0
    fk = db.schema.foreign_keys[0]
    pos = materialize_join_sentences(fk, db.rows["parent"], db.rows["child"], db)[:4]
    return sample_negatives(pos, k, rng, db.sentences("child"))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.d_model, c.n_layers, c.n_heads, c.ff_hidden) == (300, 4, 4, 1200)
        assert (c.lr, c.beta1, c.beta2, c.adam_eps, c.batch_size) == (1e-4, 0.9, 0.999, 1e-8, 32)

    @pytest.mark.parametrize("bad", [dict(variant="B"), dict(d_model=10, n_heads=4), dict(lr=0),
                                     dict(batch_size=0), dict(pretrain_epochs=-1), dict(precision="f16")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        c = TrainConfig(variant="j", seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1})


class TestMlmLoss:
    def test_near_uniform_at_init(self, rng):
        db = functional_dependency(n_rows=200, n_x=4, n_y=5).database()  # 20 z values
        model = TableEncoderModel.from_database(db, TrainConfig(**TINY).model_config(), seed=0)
        zcol = db.schema.column_id("fd", "z")
        masked = [apply_mask(s, rng, {zcol}) for s in db.sentences("fd")[:32]]
        assert abs(mlm_loss(masked, model).item() - math.log(20)) < 0.2

    def test_forced_logit_gives_zero(self, movie_db, rng):
        model = TableEncoderModel.from_database(movie_db, TrainConfig(**TINY).model_config(), seed=0)
        col = movie_db.schema.column_id("directors", "genre")
        m = apply_mask(movie_db.sentences("directors")[0], rng, {col})
        O, _, _ = model.forward([m.base])
        out = O.data[0, m.mask_position]
        head = model.head_for(col).data
        head[:] = 0
        head[:, m.target[1] - 3] = 1e4 * out / np.dot(out, out)
        assert mlm_loss([m], model).item() < 1e-9

    def test_duplication_leaves_mean(self, movie_db, rng):
        model = TableEncoderModel.from_database(movie_db, TrainConfig(**TINY).model_config(), seed=0)
        batch = [apply_mask(s, rng) for s in movie_db.sentences("movies")]
        a = mlm_loss(batch, model).item()
        b = mlm_loss(batch + batch, model).item()
        assert abs(a - b) < 1e-12


class TestNspLoss:
    def setup_method(self):
        self.db = unique_join(n_keys=10).database()
        self.model = TableEncoderModel.from_database(self.db, TrainConfig(**TINY).model_config(), seed=0)

    def test_zero_scores_k1(self, rng):
        pairs = _pairs_with_zero_head(self.db, self.model, 1, rng)
        assert nsp_loss(pairs, self.model).item() == pytest.approx(2 * math.log(2), abs=1e-12)
        assert nsp_loss(pairs, self.model).item() == pytest.approx(1.3863, abs=1e-4)

    def test_each_negative_adds_ln2(self, rng):
        pairs = _pairs_with_zero_head(self.db, self.model, 3, rng)
        assert nsp_loss(pairs, self.model).item() == pytest.approx(4 * math.log(2), abs=1e-12)

    def test_limits(self):
        assert nsp_loss_from_scores(np.array([50.0]), np.array([-50.0])) < 1e-20
        assert nsp_loss_from_scores(np.array([0.0]), np.array([0.0, 0.0])) == pytest.approx(3 * math.log(2))

    def test_matches_numpy_reference(self, rng):
        fk = self.db.schema.foreign_keys[0]
        pos = materialize_join_sentences(fk, self.db.rows["parent"], self.db.rows["child"], self.db)
        pairs = sample_negatives(pos, 2, rng, self.db.sentences("child"))
        v = nsp_scores(pairs, self.model).data
        labels = np.array([p.label for p in pairs], bool)
        assert nsp_loss(pairs, self.model).item() == pytest.approx(
            nsp_loss_from_scores(v[labels], v[~labels]), abs=1e-12)

    def test_needs_positive(self, rng):
        pairs = _pairs_with_zero_head(self.db, self.model, 1, rng)
        with pytest.raises(ValueError):
            nsp_loss([p for p in pairs if p.label == 0], self.model)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ag.Parameter(np.array([1.0, -2.0]), name="p")
        optimizer_step([p], [np.zeros(2)], OptimizerState(lr=0.1))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr(self):
        p = ag.Parameter(np.array([0.5]), name="p")
        state = OptimizerState(lr=1e-4)
        optimizer_step([p], [np.array([1.0])], state)
        # bias-corrected m/sqrt(v) = 1 on the first step
        assert 0.5 - p.data[0] == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-12)
        for _ in range(5):
            optimizer_step([p], [np.array([1.0])], state)
        assert 0.5 - p.data[0] == pytest.approx(6e-4, rel=1e-6)

    def test_deterministic(self, rng):
        g = [rng.normal(size=(3, 2)) for _ in range(4)]
        out = []
        for _ in range(2):
            p = ag.Parameter(np.ones((3, 2)), name="w")
            st = OptimizerState(lr=1e-2)
            for gi in g:
                optimizer_step([p], [gi], st)
            out.append(p.data.copy())
        np.testing.assert_array_equal(out[0], out[1])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            optimizer_step([ag.Parameter(np.ones(2), name="p")], [np.ones(3)], OptimizerState())

    def test_wrapper_uses_grads(self):
        p = ag.Parameter(np.array([1.0]), name="p")
        opt = Adam([p], lr=0.5)
        p.grad = np.array([-3.0])
        opt.step()
        assert p.data[0] == pytest.approx(1.5)


class TestRelBertA:
    def test_zero_epochs_is_initialisation(self, movie_db):
        cfg = TrainConfig(**TINY, pretrain_epochs=0, finetune_epochs=0, target="movies.director_id")
        model, reports = train_relbert_a(movie_db, cfg)
        fresh = TableEncoderModel.from_database(movie_db, cfg.model_config(), seed=cfg.seed)
        assert model.param_digest() == fresh.param_digest()
        assert reports == []

    def test_total_is_sum_each_epoch(self, movie_db):
        cfg = TrainConfig(**TINY, pretrain_epochs=2, finetune_epochs=3, target="movies.director_id", batch_size=4)
        _, reports = train_relbert_a(movie_db, cfg)
        assert [r.stage for r in reports] == ["pretrain"] * 2 + ["finetune"] * 3
        for r in reports:
            assert r.l_total - (r.l_mlm + r.l_nsp) == pytest.approx(0.0, abs=1e-9)
            assert r.l_mlm >= 0 and r.l_nsp >= 0 and np.isfinite(r.l_total)
        assert all(r.l_nsp > 0 for r in reports if r.stage == "finetune")

    def test_fd_loss_decreases(self):
        db = functional_dependency(n_rows=200, n_x=5, n_y=4).database()
        cfg = TrainConfig(**TINY, pretrain_epochs=0, finetune_epochs=50, target="fd.z", use_nsp=False)
        _, reports = train_relbert_a(db, cfg)
        ft = [r for r in reports if r.stage == "finetune"]
        assert len(ft) == 50 and ft[-1].l_total < ft[0].l_total

    def test_deterministic_reports(self, movie_db):
        cfg = TrainConfig(**TINY, pretrain_epochs=1, finetune_epochs=2, target="movies.director_id", batch_size=4)
        (m1, r1), (m2, r2) = train_relbert_a(movie_db, cfg), train_relbert_a(movie_db, cfg)
        assert [(r.l_mlm, r.l_nsp) for r in r1] == [(r.l_mlm, r.l_nsp) for r in r2]
        assert m1.param_digest() == m2.param_digest()

    def test_holdout_rows_never_seen(self, movie_db):
        task = resolve_task(movie_db, TrainConfig(target="movies.director_id"))
        rows = [r for r in movie_db.rows["movies"] if r.row_index != 0]
        pairs = task_pairs(movie_db, task, rows)
        assert {p.first.source for p in pairs} == {("movies", i) for i in range(1, 6)}

    def test_partner_hides_target_space(self, movie_db):
        task = resolve_task(movie_db, TrainConfig(target="movies.director_id"))
        assert task.partner_table() == "directors"
        pk = movie_db.schema.column_id("directors", "director_id")
        for p in task_pairs(movie_db, task):
            assert pk not in p.second.column_ids
            assert movie_db.schema.column_id("movies", "director_id") in p.first.column_ids

    def test_gradient_flow(self, movie_db, rng):
        cfg = TrainConfig(**TINY)
        model = TableEncoderModel.from_database(movie_db, cfg.model_config(), seed=0)
        task = Task(("movies", "director_id"), movie_db.schema.foreign_keys[0])
        pos = task_pairs(movie_db, task)
        pairs = sample_negatives(pos, 1, rng, movie_db.sentences("directors"))
        tcol = movie_db.schema.column_id("movies", "director_id")
        masked = [apply_mask(p.as_sentence(), rng, {tcol}) for p in pos]
        with ag.fresh_tape():
            ag.backward(mlm_loss(masked, model) + nsp_loss(pairs, model))
        assert np.any(model.nsp_w.grad != 0)
        assert any(p.grad is not None and np.any(p.grad != 0) for p in model.embeddings.values())

    def test_wrong_variant(self, movie_db):
        with pytest.raises(ConfigError):
            train_relbert_a(movie_db, TrainConfig(**TINY, variant="J"))


class TestRelBertJ:
    def test_single_table_rejected(self):
        db = functional_dependency(n_rows=20).database()
        with pytest.raises(ConfigError):
            train_relbert_j(db, TrainConfig(**TINY, variant="J"))

    def test_per_table_mlm_touches_own_heads_only(self, movie_db, rng):
        model = TableEncoderModel.from_database(movie_db, TrainConfig(**TINY).model_config(), seed=0)
        maskable = default_maskable(movie_db, mask_keys=False)
        masked = [apply_mask(s, rng, maskable) for s in movie_db.sentences("directors")]
        with ag.fresh_tape():
            ag.backward(mlm_loss(masked, model))
        for name in ("movies.title", "movies.year"):
            space = movie_db.schema.column_id(*name.split("."))
            assert model.heads[space].grad is None

    def test_separates_positive_from_negative(self):
        db = unique_join(n_keys=12, n_attr=3).database()
        cfg = TrainConfig(**TINY, variant="J", pretrain_epochs=2, finetune_epochs=200, batch_size=4, neg_samples=3)
        model, reports = train(db, cfg)
        fk = db.schema.foreign_keys[0]
        pos = materialize_join_sentences(fk, db.rows["parent"], db.rows["child"], db)
        pairs = sample_negatives(pos, 3, np.random.default_rng(5), db.sentences("child"))
        p = ag.ops.sigmoid(nsp_scores(pairs, model)).data
        labels = np.array([x.label for x in pairs], bool)
        assert p[labels].mean() > p[~labels].mean()
        assert all(r.l_mlm == 0 for r in reports if r.stage == "finetune")

import numpy as np
import pytest
from dataclasses import replace

from detlab import detsim as D
from detlab import evaluate as E
from detlab import trainer as T
from detlab.model import DetectionModel
from detlab.resemblance import Mode


def tiny_world(seed=3):
    cfg = D.DatasetConfig(
        num_base=4,
        num_novel=2,
        embed_dim=8,
        confusable_pairs=[(0, 4, 15.0)],
        base_train_scenes=32,
        pool_scenes_per_class=8,
        test_scenes_per_class=3,
        seed=seed,
    )
    return D.generate_dataset(cfg)


def tiny_train_config(**overrides):
    defaults = dict(seed=0, total_iterations=80, batch_scenes=8)
    defaults.update(overrides)
    return T.TrainConfig(**defaults)


def fresh_model(ds, seed=0, hidden=24, con=6):
    return DetectionModel(
        ds.config.embed_dim,
        ds.config.num_classes,
        hidden_dim=hidden,
        con_dim=con,
        rng=np.random.default_rng([seed, 7]),
    )


def states_equal(a: DetectionModel, b: DetectionModel) -> bool:
    return all(np.array_equal(a_p.value, b_p.value) for a_p, b_p in zip(a.params, b.params))


def finetune(ds, model, cfg):
    catalog = ds.catalog()
    shots = D.sample_kshot(ds.splits["pool"], cfg.kshot, catalog, np.random.default_rng([cfg.seed, 8]))
    return T.run_finetune(model, shots, cfg, catalog)


class TestTrainStepIdentities:
    def test_lambda_zero_step_bitwise_equals_contrastive_free(self):
        ds = tiny_world()
        catalog = ds.catalog()
        batch = T.collect_batch(ds.splits["pool"][:6], catalog)
        results = []
        for mode, balance in (("gcl", 0.0), ("none", 0.7)):
            model = fresh_model(ds, seed=5)
            cfg = tiny_train_config(contrastive_mode=mode, balance=balance)
            trainable = model.params
            T.train_step(
                model, trainable, batch, cfg, catalog,
                select_mode=Mode.GCL, group=None, counter=None, mining_active=False,
            )
            results.append(model)
        assert states_equal(results[0], results[1])

    def test_loss_decomposition_identity(self):
        ds = tiny_world()
        cfg = tiny_train_config(total_iterations=30, contrastive_mode="fsrc")
        model = fresh_model(ds)
        state = finetune(ds, model, cfg)
        for row in state.loss_history:
            expected = row.cls + row.box + row.objectness + cfg.balance * row.rcl
            assert row.total == pytest.approx(expected, abs=1e-12)

    def test_divergence_aborts_with_term_name(self):
        ds = tiny_world()
        catalog = ds.catalog()
        model = fresh_model(ds)
        model.cls_w.value[...] = np.inf
        batch = T.collect_batch(ds.splits["pool"][:4], catalog)
        with np.errstate(invalid="ignore"), pytest.raises(T.DivergenceError, match="L_cls"):
            T.compute_losses(model, batch, tiny_train_config(), catalog, Mode.GCL, None)


class TestRunBasePretrain:
    def test_zero_iterations_model_unchanged(self):
        ds = tiny_world()
        model = fresh_model(ds)
        before = model.state_dict()
        T.run_base_pretrain(
            model, ds.splits["base_train"], tiny_train_config(total_iterations=0), ds.catalog()
        )
        after = model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_rejects_novel_instances(self):
        ds = tiny_world()
        with pytest.raises(ValueError):
            T.run_base_pretrain(
                fresh_model(ds), ds.splits["pool"], tiny_train_config(), ds.catalog()
            )

    def test_deterministic_checkpoints(self):
        ds = tiny_world()
        nets = []
        for _ in range(2):
            model = fresh_model(ds, seed=2)
            T.run_base_pretrain(
                model, ds.splits["base_train"], tiny_train_config(total_iterations=40), ds.catalog()
            )
            nets.append(model)
        assert states_equal(*nets)

    def test_default_world_accuracy_and_map(self, default_world, pretrained):
        """Held-out base scenes: >= 90% classification accuracy, mAP50 >= 0.8."""
        ds = default_world
        catalog = ds.catalog()
        base_test = [
            s for s in ds.splits["test"] if s.scene.gt_labels[0] in catalog.base_classes
        ]
        acc = E.classification_accuracy(pretrained, base_test, catalog)
        report = E.evaluate_model(pretrained, base_test, catalog)
        assert acc >= 0.90
        assert report.map50_all >= 0.8

    def test_smoke_loss_decreases(self, default_world):
        """200 steps on the default world: trailing moving average below leading."""
        ds = default_world
        model = DetectionModel(
            ds.config.embed_dim, ds.config.num_classes, rng=np.random.default_rng([1, 7])
        )
        history = T.run_base_pretrain(
            model,
            ds.splits["base_train"],
            replace(T.TrainConfig(seed=1), total_iterations=200),
            ds.catalog(),
        )
        totals = [row.total for row in history]
        assert np.mean(totals[-20:]) < np.mean(totals[:20])
        assert totals[-1] < totals[0]


class TestRunFinetune:
    def test_mode_timeline_single_flip(self, default_world, pretrained):
        ds = default_world
        cfg = T.TrainConfig(seed=0, total_iterations=200, milestone=0.5)
        state = finetune(ds, pretrained.copy(), cfg)
        modes = [row.mode for row in state.loss_history]
        switch = 100
        assert all(m == "gcl" for m in modes[:switch])
        # group was non-empty, so the rest must be rcl
        assert state.group is not None and state.group
        assert all(m == "rcl" for m in modes[switch:])

    def test_group_frozen_after_milestone(self):
        ds = tiny_world()
        cfg = tiny_train_config(contrastive_mode="fsrc", milestone=0.5)
        state = finetune(ds, fresh_model(ds), cfg)
        assert state.group is not None

    def test_milestone_zero_behaves_as_warning_case(self, caplog):
        ds = tiny_world()
        cfg = tiny_train_config(contrastive_mode="fsrc", milestone=0.0)
        with caplog.at_level("WARNING"):
            state = finetune(ds, fresh_model(ds), cfg)
        assert "empty" in caplog.text.lower()
        assert state.group is not None and len(state.group) == 0
        assert all(row.mode == "gcl" for row in state.loss_history)

    def test_milestone_one_equals_gcl_only_run(self):
        ds = tiny_world()
        base = fresh_model(ds, seed=4)
        fsrc_model = base.copy()
        gcl_model = base.copy()
        finetune(ds, fsrc_model, tiny_train_config(contrastive_mode="fsrc", milestone=1.0))
        finetune(ds, gcl_model, tiny_train_config(contrastive_mode="gcl", milestone=1.0))
        for pa, pb in zip(fsrc_model.params, gcl_model.params):
            np.testing.assert_allclose(pa.value, pb.value, atol=1e-12)

    def test_none_vs_gcl_trajectories_diverge(self):
        ds = tiny_world()
        base = fresh_model(ds, seed=6)
        none_model, gcl_model = base.copy(), base.copy()
        finetune(ds, none_model, tiny_train_config(contrastive_mode="none"))
        finetune(ds, gcl_model, tiny_train_config(contrastive_mode="gcl"))
        assert not states_equal(none_model, gcl_model)

    def test_none_mode_logs_zero_rcl(self):
        ds = tiny_world()
        state = finetune(ds, fresh_model(ds), tiny_train_config(contrastive_mode="none"))
        assert all(row.rcl == 0.0 and row.mode == "none" for row in state.loss_history)

    def test_encoder_frozen_throughout(self):
        ds = tiny_world()
        model = fresh_model(ds, seed=8)
        before_w = model.encoder_w.value.copy()
        finetune(ds, model, tiny_train_config(contrastive_mode="fsrc"))
        assert np.array_equal(model.encoder_w.value, before_w)

    def test_determinism(self):
        ds = tiny_world()
        base = fresh_model(ds, seed=9)
        runs = []
        for _ in range(2):
            model = base.copy()
            state = finetune(ds, model, tiny_train_config(contrastive_mode="fsrc"))
            runs.append((model, state))
        assert states_equal(runs[0][0], runs[1][0])
        assert runs[0][1].loss_history == runs[1][1].loss_history
        assert runs[0][1].pair_counter.counts == runs[1][1].pair_counter.counts

    def test_mining_restricted_to_window(self):
        """Pairs are only observed in [mine_start, switch)."""
        ds = tiny_world()
        cfg = tiny_train_config(
            contrastive_mode="gcl", milestone=0.5, mine_start_fraction=0.25,
            total_iterations=40,
        )
        catalog = ds.catalog()
        shots = D.sample_kshot(
            ds.splits["pool"], cfg.kshot, catalog, np.random.default_rng([cfg.seed, 8])
        )
        model = fresh_model(ds, seed=10)
        state = T.run_finetune(model, shots, cfg, catalog)
        full_counts = sum(state.pair_counter.counts.values())
        # with an empty window (start == switch) nothing may be recorded
        model2 = fresh_model(ds, seed=10)
        cfg2 = replace(cfg, mine_start_fraction=0.5)
        state2 = T.run_finetune(model2, shots, cfg2, catalog)
        assert sum(state2.pair_counter.counts.values()) == 0
        assert full_counts >= 0

    def test_group_recovery_on_default_world(self, default_world, pretrained):
        """Planted confusable classes are recovered exactly with defaults."""
        ds = default_world
        catalog = ds.catalog()
        cfg = T.TrainConfig(seed=0)
        shots = D.sample_kshot(
            ds.splits["pool"], cfg.kshot, catalog, np.random.default_rng([cfg.seed, 8])
        )
        model = pretrained.copy()
        state = T.run_finetune(model, shots, cfg, catalog)
        assert state.group is not None
        assert state.group.classes == frozenset({0, 1, 12, 13})


class TestLossCSV:
    def test_header_and_rows(self, tmp_path):
        ds = tiny_world()
        state = finetune(
            ds, fresh_model(ds), tiny_train_config(total_iterations=10, contrastive_mode="fsrc")
        )
        path = tmp_path / "loss.csv"
        T.write_loss_csv(state.loss_history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,L_cls,L_Bbox,L_objectness,L_RCL,total,mode"
        assert len(lines) == 11

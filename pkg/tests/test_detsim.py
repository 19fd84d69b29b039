import math

import numpy as np
import pytest

from detlab import detsim as D


def small_config(**overrides):
    defaults = dict(
        num_base=4,
        num_novel=2,
        embed_dim=8,
        confusable_pairs=[(0, 4, 15.0)],
        pool_scenes_per_class=4,
        test_scenes_per_class=2,
        base_train_scenes=12,
        seed=3,
    )
    defaults.update(overrides)
    return D.DatasetConfig(**defaults)


def angle_deg(u, v):
    return math.degrees(math.acos(float(np.clip(u @ v, -1.0, 1.0))))


class TestBoxAndIoU:
    def test_identical_boxes(self):
        b = D.Box(0.1, 0.1, 0.5, 0.6)
        assert D.iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert D.iou(D.Box(0.0, 0.0, 0.2, 0.2), D.Box(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_hand_computed_third(self):
        a = D.Box(0.0, 0.0, 2 / 3, 2 / 3)
        b = D.Box(1 / 3, 0.0, 1.0, 2 / 3)
        assert D.iou(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetry_and_identity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x1, y1 = rng.uniform(0, 0.6, 2)
            a = D.Box(x1, y1, x1 + rng.uniform(0.05, 0.4), y1 + rng.uniform(0.05, 0.4))
            x1, y1 = rng.uniform(0, 0.6, 2)
            b = D.Box(x1, y1, x1 + rng.uniform(0.05, 0.4), y1 + rng.uniform(0.05, 0.4))
            assert D.iou(a, b) == D.iou(b, a)
            assert 0.0 <= D.iou(a, b) <= 1.0
            assert D.iou(a, a) == 1.0

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            D.Box(0.5, 0.1, 0.4, 0.2)
        with pytest.raises(ValueError):
            D.Box(-0.1, 0.1, 0.4, 0.2)


class TestBoxDeltas:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x1, y1 = rng.uniform(0.1, 0.5, 2)
            prop = D.Box(x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3))
            x1, y1 = rng.uniform(0.1, 0.5, 2)
            gt = D.Box(x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3))
            delta = D.encode_box_delta(prop, gt)
            rec = D.apply_box_delta(prop, delta)
            assert D.iou(rec, gt) > 0.999

    def test_identity_delta(self):
        b = D.Box(0.2, 0.2, 0.5, 0.6)
        np.testing.assert_allclose(D.encode_box_delta(b, b), np.zeros(4), atol=1e-12)


class TestPrototypes:
    def test_planted_pair_angle(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        assert angle_deg(protos[0].prototype, protos[4].prototype) == pytest.approx(15.0, abs=1.0)

    def test_unplanted_classes_well_separated(self):
        cfg = D.DatasetConfig(
            num_base=6, num_novel=2, embed_dim=16, confusable_pairs=[]
        )
        protos = D.generate_prototypes(cfg, np.random.default_rng(1))
        for i in range(8):
            for j in range(i + 1, 8):
                assert angle_deg(protos[i].prototype, protos[j].prototype) >= 60.0

    def test_unit_norm(self):
        cfg = small_config()
        for spec in D.generate_prototypes(cfg, np.random.default_rng(2)):
            assert abs(np.linalg.norm(spec.prototype) - 1.0) < 1e-9

    def test_deterministic_per_seed(self):
        cfg = small_config()
        a = D.generate_prototypes(cfg, np.random.default_rng(5))
        b = D.generate_prototypes(cfg, np.random.default_rng(5))
        for x, y in zip(a, b):
            assert np.array_equal(x.prototype, y.prototype)

    def test_novel_flags(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(3))
        assert [s.is_novel for s in protos] == [False] * 4 + [True] * 2

    def test_infeasible_configs_raise(self):
        with pytest.raises(D.GenerationError):
            small_config(embed_dim=4)  # fewer dims than classes
        with pytest.raises(D.GenerationError):
            small_config(confusable_pairs=[(0, 4, 95.0)])  # angle out of range
        with pytest.raises(D.GenerationError):
            small_config(confusable_pairs=[(0, 1, 15.0)])  # no novel member
        with pytest.raises(D.GenerationError):
            small_config(confusable_pairs=[(0, 4, 15.0), (0, 5, 20.0)])  # reuse
        with pytest.raises(D.GenerationError):
            small_config(confusable_pairs=[(0, 9, 15.0)])  # bad id


class TestSceneGeneration:
    def test_noiseless_unmixed_feature_is_scaled_prototype(self):
        cfg = small_config(noise_sigma=0.0, mix_max=0.0)
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        sample = D.generate_scene_with_proposals(
            protos, cfg, np.random.default_rng(1), class_id=2
        )
        for p in sample.proposals:
            if p.matched_gt_index is not None:
                np.testing.assert_allclose(
                    p.feature, p.iou * protos[2].prototype, atol=1e-12
                )

    def test_feature_formula_at_full_overlap(self):
        proto = np.array([1.0, 0.0])
        other = np.array([0.0, 1.0])
        feat = D.make_proposal_feature(proto, other, 1.0, 0.7, np.zeros(2))
        np.testing.assert_array_equal(feat, proto)

    def test_jittered_iou_is_exact(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        for _ in range(20):
            sample = D.generate_scene_with_proposals(protos, cfg, rng)
            gt = sample.scene.gt_boxes[0]
            for p in sample.proposals:
                if p.matched_gt_index is not None:
                    assert D.iou(p.box, gt) == pytest.approx(p.iou, abs=1e-9)

    def test_background_proposals_below_threshold(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(3)
        for _ in range(20):
            sample = D.generate_scene_with_proposals(protos, cfg, rng)
            for p in sample.proposals:
                if p.matched_gt_index is None:
                    for gt in sample.scene.gt_boxes:
                        assert D.iou(p.box, gt) < cfg.fg_iou_threshold

    def test_fg_bg_label_contract(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(4)
        sample = D.generate_scene_with_proposals(protos, cfg, rng, class_id=1)
        for p in sample.proposals:
            if p.gt_class == cfg.num_classes:
                assert p.iou < cfg.fg_iou_threshold
            else:
                assert p.gt_class == 1
                assert p.iou >= cfg.fg_iou_threshold

    def test_iou_histogram_covers_both_sides_of_phi(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(5)
        ious = []
        while len(ious) < 1000:
            sample = D.generate_scene_with_proposals(protos, cfg, rng)
            ious.extend(
                p.iou for p in sample.proposals if p.matched_gt_index is not None
            )
        ious = np.array(ious[:1000])
        assert (ious >= 0.7).sum() > 100
        assert ((ious < 0.7) & (ious >= 0.1)).sum() > 100

    def test_boxes_stay_in_unit_square(self):
        cfg = small_config()
        protos = D.generate_prototypes(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(6)
        for _ in range(50):
            sample = D.generate_scene_with_proposals(protos, cfg, rng)
            for p in sample.proposals:
                assert 0.0 <= p.box.x1 < p.box.x2 <= 1.0
                assert 0.0 <= p.box.y1 < p.box.y2 <= 1.0


class TestDataset:
    def test_split_sizes(self):
        cfg = small_config()
        ds = D.generate_dataset(cfg)
        assert len(ds.splits["base_train"]) == 12
        assert len(ds.splits["pool"]) == 6 * 4
        assert len(ds.splits["test"]) == 6 * 2

    def test_base_split_contains_no_novel(self):
        ds = D.generate_dataset(small_config())
        catalog = ds.catalog()
        for sample in ds.splits["base_train"]:
            assert all(l in catalog.base_classes for l in sample.scene.gt_labels)

    def test_pure_function_of_config(self):
        cfg = small_config()
        a = D.generate_dataset(cfg)
        b = D.generate_dataset(small_config())
        for split in a.splits:
            for sa, sb in zip(a.splits[split], b.splits[split]):
                assert np.array_equal(sa.proposals[0].feature, sb.proposals[0].feature)
                assert sa.scene.gt_boxes[0] == sb.scene.gt_boxes[0]

    def test_save_load_round_trip(self, tmp_path):
        ds = D.generate_dataset(small_config())
        path = tmp_path / "data.jsonl"
        D.save_dataset(ds, path)
        loaded = D.load_dataset(path)
        assert loaded.config == ds.config
        for split in ds.splits:
            assert len(loaded.splits[split]) == len(ds.splits[split])
            for sa, sb in zip(ds.splits[split], loaded.splits[split]):
                assert sa.scene.gt_labels == sb.scene.gt_labels
                for pa, pb in zip(sa.proposals, sb.proposals):
                    assert np.array_equal(pa.feature, pb.feature)
                    assert pa.box == pb.box
                    assert pa.iou == pb.iou
        for a, b in zip(ds.class_specs, loaded.class_specs):
            assert np.array_equal(a.prototype, b.prototype)

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = D.generate_dataset(small_config())
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        D.save_dataset(ds, p1)
        D.save_dataset(D.generate_dataset(small_config()), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "bogus.jsonl"
        path.write_text('{"format": "something-else", "version": 1}\n')
        with pytest.raises(ValueError):
            D.load_dataset(path)


class TestSampleKShot:
    def test_one_shot_five_classes(self):
        cfg = small_config()
        ds = D.generate_dataset(cfg)
        catalog = ds.catalog()
        subset = D.sample_kshot(ds.splits["pool"], 1, catalog, np.random.default_rng(0))
        assert len(subset) == 6
        labels = sorted(s.scene.gt_labels[0] for s in subset)
        assert labels == list(range(6))

    def test_exact_count_contract(self):
        cfg = small_config()
        ds = D.generate_dataset(cfg)
        catalog = ds.catalog()
        subset = D.sample_kshot(ds.splits["pool"], 3, catalog, np.random.default_rng(1))
        counts = {}
        for s in subset:
            for l in s.scene.gt_labels:
                counts[l] = counts.get(l, 0) + 1
        assert counts == {cid: 3 for cid in range(6)}

    def test_deterministic(self):
        ds = D.generate_dataset(small_config())
        catalog = ds.catalog()
        a = D.sample_kshot(ds.splits["pool"], 2, catalog, np.random.default_rng(9))
        b = D.sample_kshot(ds.splits["pool"], 2, catalog, np.random.default_rng(9))
        assert [id(x) for x in a] == [id(x) for x in b]

    def test_insufficient_instances_names_class(self):
        ds = D.generate_dataset(small_config())
        catalog = ds.catalog()
        with pytest.raises(ValueError, match="class 0"):
            D.sample_kshot(ds.splits["pool"], 99, catalog, np.random.default_rng(0))

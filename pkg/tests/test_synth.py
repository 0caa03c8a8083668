import math
from collections import Counter

import numpy as np
import pytest

from nocs_adapt.errors import InvalidSpec
from nocs_adapt.geom import Z_CONTINUOUS, geodesic_rotation_error, rotation_about_axis
from nocs_adapt.nocs import pose_and_size
from nocs_adapt.synth import (
    CATEGORIES,
    CLASS_NAMES,
    CLEAN,
    SOURCE_NOISE,
    TARGET_NOISE,
    CategorySpec,
    NoiseModel,
    class_schedule,
    generate_instance,
    generate_instances,
    generate_split,
)


def assert_same_instance(a, b):
    assert a.instance_id == b.instance_id and a.class_id == b.class_id
    for name in ("gt_nocs", "depth", "feature", "label_nocs", "depth_outlier_mask", "label_outlier_mask", "gt_size"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.gt_pose.matrix(), b.gt_pose.matrix())


class TestCategories:
    def test_six_classes(self):
        assert set(CATEGORIES) == set(CLASS_NAMES) == {"bottle", "bowl", "camera", "can", "laptop", "mug"}

    @pytest.mark.parametrize("name", CLASS_NAMES)
    def test_symmetry_assignment(self, name):
        expected = "continuous" if name in ("bottle", "bowl", "can") else "none"
        assert CATEGORIES[name].symmetry.kind == expected


class TestGenerateInstance:
    @pytest.mark.parametrize("name", CLASS_NAMES)
    def test_noiseless_depth_is_exact(self, name):
        inst = generate_instance(CATEGORIES[name], 512, CLEAN, seed=3)
        p = inst.gt_pose
        expected = p.scale * inst.gt_nocs @ p.rotation.T + p.translation
        assert np.abs(inst.depth - expected).max() <= 1e-12
        assert not inst.corruption_mask.any()

    @pytest.mark.parametrize("name", CLASS_NAMES)
    def test_nocs_diagonal_is_one(self, name):
        inst = generate_instance(CATEGORIES[name], 1024, CLEAN, seed=5)
        lo, hi = inst.gt_nocs.min(axis=0), inst.gt_nocs.max(axis=0)
        assert np.linalg.norm(hi - lo) == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose((lo + hi) / 2, 0.5, atol=1e-12)
        assert inst.gt_pose.scale == pytest.approx(np.linalg.norm(inst.gt_size), rel=1e-12)

    @pytest.mark.parametrize("name", CLASS_NAMES)
    def test_pose_recovered_from_clean_instance(self, name):
        inst = generate_instance(CATEGORIES[name], 1024, CLEAN, seed=7)
        pose, size, _ = pose_and_size(inst.gt_nocs, inst.depth)
        assert geodesic_rotation_error(pose.rotation, inst.gt_pose.rotation) < 1e-9
        np.testing.assert_allclose(pose.translation, inst.gt_pose.translation, atol=1e-9)
        assert pose.scale == pytest.approx(inst.gt_pose.scale, rel=1e-9)
        np.testing.assert_allclose(size, inst.gt_size, atol=1e-9)

    @pytest.mark.parametrize("n", [100, 1024, 1001])
    def test_outlier_counts(self, n):
        noise = NoiseModel(outlier_fraction=0.3, label_outlier_fraction=0.1)
        inst = generate_instance(CATEGORIES["mug"], n, noise, seed=1)
        assert inst.depth_outlier_mask.sum() == round(0.3 * n)
        assert inst.label_outlier_mask.sum() == round(0.1 * n)
        assert not (inst.depth_outlier_mask & inst.label_outlier_mask).any()

    def test_label_outliers_only_touch_labels(self):
        inst = generate_instance(CATEGORIES["camera"], 256, NoiseModel(label_outlier_fraction=0.2), seed=2)
        clean = ~inst.label_outlier_mask
        np.testing.assert_array_equal(inst.label_nocs[clean], inst.gt_nocs[clean])
        assert np.all((inst.label_nocs >= 0) & (inst.label_nocs <= 1))
        np.testing.assert_allclose(inst.depth, inst.gt_pose.apply(inst.gt_nocs), atol=1e-12)

    def test_fixed_seed_is_bit_identical(self):
        a = generate_instance(CATEGORIES["laptop"], 300, TARGET_NOISE, seed=[9, 4], instance_id="x")
        b = generate_instance(CATEGORIES["laptop"], 300, TARGET_NOISE, seed=[9, 4], instance_id="x")
        assert_same_instance(a, b)

    def test_different_seed_differs(self):
        a = generate_instance(CATEGORIES["can"], 64, CLEAN, seed=0)
        b = generate_instance(CATEGORIES["can"], 64, CLEAN, seed=1)
        assert not np.array_equal(a.depth, b.depth)

    def test_feature_layout(self):
        inst = generate_instance(CATEGORIES["bowl"], 128, CLEAN, seed=0)
        assert inst.feature.shape == (128, 6)
        np.testing.assert_array_equal(inst.feature[:, :3], inst.gt_nocs)
        np.testing.assert_array_equal(inst.feature[:, 3:], inst.gt_nocs)

    def test_target_feature_is_shifted_more_than_source(self):
        src = generate_instance(CATEGORIES["mug"], 1024, SOURCE_NOISE, seed=4)
        tgt = generate_instance(CATEGORIES["mug"], 1024, TARGET_NOISE, seed=4)
        err = lambda inst: np.abs(inst.feature[:, :3] - inst.gt_nocs).mean()
        assert err(tgt) > 2 * err(src)

    def test_domain_warp_and_bias(self):
        noise = NoiseModel(domain_bias=(0.01, 0.0, 0.0))
        clean = generate_instance(CATEGORIES["camera"], 64, CLEAN, seed=8)
        biased = generate_instance(CATEGORIES["camera"], 64, noise, seed=8)
        np.testing.assert_allclose(biased.depth - clean.depth, np.tile([0.01, 0, 0], (64, 1)), atol=1e-12)

    def test_too_few_points(self):
        with pytest.raises(InvalidSpec):
            generate_instance(CATEGORIES["can"], 15)

    def test_empty_shape_range(self):
        spec = CategorySpec("can", "cylinder", {"radius": (0.04, 0.03), "height": (0.1, 0.1)})
        with pytest.raises(InvalidSpec):
            generate_instance(spec, 64)
        with pytest.raises(InvalidSpec):
            generate_instance(CategorySpec("blob", "cylinder", {}), 64)

    @pytest.mark.parametrize("kwargs", [
        {"outlier_fraction": 1.0},
        {"label_outlier_fraction": -0.1},
        {"outlier_fraction": 0.6, "label_outlier_fraction": 0.5},
        {"depth_sigma": -1.0},
    ])
    def test_invalid_noise(self, kwargs):
        with pytest.raises(InvalidSpec):
            NoiseModel(**kwargs)

    def test_noise_round_trip(self):
        assert NoiseModel.from_dict(TARGET_NOISE.to_dict()) == TARGET_NOISE


class TestSymmetry:
    @pytest.mark.parametrize("name", ["bottle", "bowl", "can"])
    def test_spin_about_axis_is_invisible(self, name):
        rng = np.random.default_rng(0)
        for seed in range(5):
            inst = generate_instance(CATEGORIES[name], 256, CLEAN, seed=seed)
            spun = inst.gt_pose.rotation @ rotation_about_axis(2, rng.uniform(0, 2 * math.pi))
            assert geodesic_rotation_error(spun, inst.gt_pose.rotation, Z_CONTINUOUS) < 1e-6

    def test_canonicalization_removes_twist_only(self):
        spec = CATEGORIES["bottle"]
        free = generate_instance(spec, 64, CLEAN, seed=11)
        canon = generate_instance(spec, 64, CLEAN, seed=11, canonicalize_symmetric=True)
        assert geodesic_rotation_error(free.gt_pose.rotation, canon.gt_pose.rotation, Z_CONTINUOUS) < 1e-6
        np.testing.assert_allclose(free.gt_pose.rotation[:, 2], canon.gt_pose.rotation[:, 2], atol=1e-12)


class TestSplits:
    def test_balanced_schedule(self):
        counts = Counter(class_schedule(CLASS_NAMES, 600))
        assert counts == {c: 100 for c in CLASS_NAMES}

    def test_schedule_without_classes(self):
        with pytest.raises(InvalidSpec):
            class_schedule([], 3)
        assert class_schedule([], 0) == []

    def test_instance_ids_and_classes(self):
        insts = generate_instances(["bottle", "mug"], 5, CLEAN, seed=0, n_points=32, prefix="s")
        assert [i.instance_id for i in insts] == [f"s_{k:05d}" for k in range(5)]
        assert [i.class_id for i in insts] == ["bottle", "mug", "bottle", "mug", "bottle"]

    def test_instances_are_independent_of_count(self):
        few = generate_instances(CLASS_NAMES, 3, TARGET_NOISE, seed=2, n_points=32)
        many = generate_instances(CLASS_NAMES, 8, TARGET_NOISE, seed=2, n_points=32)
        for a, b in zip(few, many):
            assert_same_instance(a, b)

    def test_empty_split_writes_empty_manifest(self, tmp_path):
        manifest = generate_split(CLASS_NAMES, 0, CLEAN, 0, out_dir=tmp_path, split="empty")
        assert manifest["instances"] == []
        assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]

    def test_same_seed_gives_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            generate_split(CLASS_NAMES, 6, TARGET_NOISE, 5, out_dir=tmp_path / name, split="t", n_points=32)
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        assert len(files) == 7
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

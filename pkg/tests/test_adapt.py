from dataclasses import replace
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nocs_adapt.adapt import (
    AdaptConfig,
    adapt_step,
    branch_loss_and_grads,
    make_pseudo_labels,
    pretrain_teacher,
    run_adaptation,
    teacher_source_loss,
)
from nocs_adapt.config import ExperimentConfig
from nocs_adapt.errors import NonFiniteLoss
from nocs_adapt.filtering import FILTER_MODES
from nocs_adapt.geom import align_depth
from nocs_adapt.model import BRANCHES, ToyPredictor
from nocs_adapt.nocs import cross_entropy, decode, discretize, softmax
from nocs_adapt.synth import CLASS_NAMES, CLEAN, SOURCE_NOISE, TARGET_NOISE, generate_instances
from oracles import naive_cross_entropy

FAST = AdaptConfig(pretrain_epochs=2, epochs=1, points_per_step=64)


@pytest.fixture(scope="module")
def source():
    return generate_instances(CLASS_NAMES, 24, SOURCE_NOISE, seed=1, n_points=128, prefix="src")


@pytest.fixture(scope="module")
def target():
    return generate_instances(CLASS_NAMES, 6, TARGET_NOISE, seed=2, n_points=128, prefix="tgt")


@pytest.fixture(scope="module")
def teacher(source):
    return pretrain_teacher(source, FAST)[0]


def random_model(seed, bins=32, lift_dim=64, scale=0.05):
    model = ToyPredictor(bins, lift_dim, seed=seed)
    rng = np.random.default_rng(seed)
    model.set_flat_weights(rng.normal(0.0, scale, model.flat_weights().size))
    return model


def flat(grads, model):
    return np.concatenate([grads.get(k, np.zeros_like(model.weights[k])).ravel() for k in BRANCHES])


def loss_at(model, fn):
    """Loss as a function of the flat weight vector."""
    def f(w):
        m = model.copy()
        m.set_flat_weights(w)
        return fn(m)
    return f


def assert_gradient_matches(model, fn, analytic, eps=1e-5, rtol=1e-6):
    """Central differences on every weight; relative error in norm and per coordinate."""
    w = model.flat_weights()
    f = loss_at(model, fn)
    fd = np.empty_like(w)
    for i in range(w.size):
        up, down = w.copy(), w.copy()
        up[i] += eps
        down[i] -= eps
        fd[i] = (f(up) - f(down)) / (2 * eps)
    assert np.linalg.norm(analytic - fd) <= rtol * np.linalg.norm(fd)
    np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=rtol * np.abs(fd).max())


def small_case(seed, n=12):
    rng = np.random.default_rng(seed)
    model = random_model(seed, bins=8, lift_dim=6, scale=0.5)
    feature = rng.random((n, 6))
    return rng, model, feature


class TestConfig:
    def test_defaults(self):
        cfg = AdaptConfig()
        assert (cfg.rho, cfg.lambda_n, cfg.lambda_c) == (0.05, 1.0, 1e-6)
        assert (cfg.momentum_gamma, cfg.momentum_every) == (0.999, 100)
        assert cfg.filter_mode == "bidirectional" and cfg.am_loss

    def test_round_trip(self):
        cfg = AdaptConfig(filter_mode="entropy", rho=0.1, seed=4)
        assert AdaptConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kwargs", [{"filter_mode": "median"}, {"target_mode": "fuzzy"}, {"momentum_gamma": 1.5}, {"epochs": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AdaptConfig(**kwargs)


class TestSourceLoss:
    def test_without_consistency_is_plain_cross_entropy(self):
        rng, model, feat = small_case(0)
        target = discretize(rng.random((12, 3)), 8, "soft")
        cfg = AdaptConfig(lambda_c=0.0)
        loss, _ = teacher_source_loss(model, feat, feat + 0.1, target, cfg)
        logits = model.forward(feat)
        assert loss == pytest.approx(sum(naive_cross_entropy(logits[k], target) for k in BRANCHES), abs=1e-9)

    def test_weighted_decomposition(self):
        rng, model, feat = small_case(1)
        x2 = feat + rng.normal(0, 0.05, feat.shape)
        target = discretize(rng.random((12, 3)), 8, "hard")
        cfg = AdaptConfig(lambda_n=0.7, lambda_c=0.3)
        loss, _ = teacher_source_loss(model, feat, x2, target, cfg)
        z1, z2 = model.forward(feat), model.forward(x2)
        expected = sum(0.7 * cross_entropy(z1[k], target) + 0.3 * cross_entropy(z2[k], softmax(z1[k])) for k in BRANCHES)
        assert loss == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(50))
    def test_gradient(self, seed):
        rng, model, feat = small_case(seed)
        x2 = feat + rng.normal(0, 0.05, feat.shape)
        target = discretize(rng.random((12, 3)), 8, "soft")
        cfg = AdaptConfig(lambda_n=1.0, lambda_c=0.5)
        frozen = {k: softmax(v) for k, v in model.forward(feat).items()}
        _, grads = teacher_source_loss(model, feat, x2, target, cfg, frozen)
        fn = lambda m: teacher_source_loss(m, feat, x2, target, cfg, frozen)[0]
        assert_gradient_matches(model, fn, flat(grads, model))


class TestBranchGradients:
    @pytest.mark.parametrize("seed", range(50))
    def test_student_loss(self, seed):
        rng, model, feat = small_case(seed)
        target = discretize(rng.random((12, 3)), 8, "soft")
        mask = rng.random(12) < 0.6
        mask[0] = True
        lifts = model.lift(feat)
        _, grads = branch_loss_and_grads(model, lifts, target, mask)
        fn = lambda m: branch_loss_and_grads(m, m.lift(feat), target, mask)[0]
        assert_gradient_matches(model, fn, flat(grads, model))

    @pytest.mark.parametrize("seed", range(50))
    def test_teacher_depth_loss_fused_only(self, seed):
        rng, model, feat = small_case(seed)
        aligned = np.clip(rng.normal(0.5, 0.3, (12, 3)), 0, 1)
        target = discretize(aligned, 8, "soft")
        _, grads = branch_loss_and_grads(model, model.lift(feat), target, branches=("fused",))
        fn = lambda m: branch_loss_and_grads(m, m.lift(feat), target, branches=("fused",))[0]
        g = flat(grads, model)
        assert_gradient_matches(model, fn, g)
        assert not g[: model.weights["A"].size + model.weights["B"].size].any()

    def test_default_size_directional_derivatives(self):
        rng = np.random.default_rng(0)
        model = random_model(0)
        feat = rng.random((40, 6))
        target = discretize(rng.random((40, 3)), 32, "soft")
        _, grads = branch_loss_and_grads(model, model.lift(feat), target)
        g = flat(grads, model)
        f = loss_at(model, lambda m: branch_loss_and_grads(m, m.lift(feat), target)[0])
        w = model.flat_weights()
        for _ in range(5):
            v = rng.normal(size=w.size)
            fd = (f(w + 1e-5 * v) - f(w - 1e-5 * v)) / 2e-5
            assert g @ v == pytest.approx(fd, rel=1e-6)


class TestPretrain:
    def test_fixed_seed_curve(self, source):
        a = pretrain_teacher(source[:6], FAST)
        b = pretrain_teacher(source[:6], FAST)
        assert a[1] == b[1] and a[0] == b[0]

    def test_does_not_modify_initial_model(self, source, teacher):
        before = teacher.copy()
        pretrain_teacher(source[:2], FAST, teacher)
        assert teacher == before

    def test_non_finite_loss_aborts(self, source):
        model = ToyPredictor()
        model.weights["A"][0, 0] = np.nan
        with pytest.raises(NonFiniteLoss):
            pretrain_teacher(source[:1], FAST, model)

    def test_fits_noiseless_features(self):
        insts = generate_instances(CLASS_NAMES, 6, CLEAN, seed=0, n_points=256)
        cfg = AdaptConfig(pretrain_epochs=200, aug_sigma=0.0, target_mode="hard", lr=10.0, points_per_step=0)
        model, curve = pretrain_teacher(insts, cfg)
        hits, within_bin = [], []
        for inst in insts:
            fused = model.forward(inst.feature)["fused"]
            truth = discretize(inst.gt_nocs, 32, "hard").argmax(axis=2)
            hits.append(np.all(fused.argmax(axis=2) == truth, axis=1))
            within_bin.append(np.all(np.abs(make_pseudo_labels(model, inst)[0] - inst.gt_nocs) <= 1 / 32, axis=1))
        assert np.concatenate(hits).mean() >= 0.99
        assert np.concatenate(within_bin).mean() >= 0.99
        assert curve[-1] < curve[0]

    @pytest.mark.slow
    def test_loss_strictly_decreases_on_default_source(self):
        cfg = ExperimentConfig()
        source = generate_instances(cfg.classes, cfg.source_instances, cfg.source_noise, cfg.split_seed("source"), cfg.n_points)
        _, curve = pretrain_teacher(source, replace(cfg.adapt, pretrain_epochs=5))
        assert all(a > b for a, b in zip(curve, curve[1:])), curve


class TestPseudoLabels:
    def test_zero_teacher_is_uniform(self, target):
        pseudo, logits = make_pseudo_labels(ToyPredictor(), target[0])
        assert set(logits) == set(BRANCHES)
        assert all(not v.any() for v in logits.values())
        np.testing.assert_allclose(pseudo, 0.5, atol=1e-15)

    def test_matches_forward(self, teacher, target):
        pseudo, logits = make_pseudo_labels(teacher, target[1])
        direct = teacher.forward(target[1].feature)
        for k in BRANCHES:
            np.testing.assert_array_equal(logits[k], direct[k])
        np.testing.assert_array_equal(pseudo, decode(direct["fused"]))

    def test_fused_always_included(self, teacher, target):
        _, logits = make_pseudo_labels(teacher, target[0], ("A",))
        assert set(logits) == {"A", "fused"}


def naive_cfg(**kw):
    return AdaptConfig(filter_mode="none", am_loss=False, points_per_step=0, **kw)


class TestAdaptStep:
    def test_naive_step_matches_hand_rolled(self, teacher, target):
        inst = target[0]
        cfg = naive_cfg(student_lr=0.5, aug_sigma=0.02, seed=3)
        student = teacher.copy()
        t0 = teacher.copy()
        report = adapt_step(t0, student, inst, cfg, step=1)

        # replay: same augmentation draw, fused branch only
        x = inst.feature + np.random.default_rng([3, 2, 1]).normal(0.0, 0.02, inst.feature.shape)
        pseudo = decode(teacher.forward(inst.feature)["fused"])
        target_bins = discretize(pseudo, 32, "soft")
        lift = teacher.lift(x)["fused"]
        z = (lift @ teacher.weights["fused"]).reshape(len(x), 3, 32)
        assert report.student_loss == pytest.approx(naive_cross_entropy(z, target_bins), abs=1e-9)
        expected = teacher.weights["fused"] - 0.5 * lift.T @ ((softmax(z) - target_bins) / len(x)).reshape(len(x), -1)
        np.testing.assert_allclose(student.weights["fused"], expected, rtol=0, atol=1e-12)
        for k in ("A", "B"):
            np.testing.assert_array_equal(student.weights[k], teacher.weights[k])
        assert t0 == teacher

    def test_infinite_rho_equals_no_filter(self, teacher, target):
        inst = target[2]
        losses = {}
        for mode, rho in (("bidirectional", math.inf), ("none", 0.05)):
            cfg = AdaptConfig(filter_mode=mode, rho=rho, points_per_step=0)
            report = adapt_step(teacher.copy(), teacher.copy(), inst, cfg, step=5)
            assert report.kept == inst.n_points
            losses[mode] = report.student_loss
        assert losses["bidirectional"] == pytest.approx(losses["none"], abs=1e-12)

    def test_bidirectional_loss_uses_exactly_kept_points(self, teacher, target):
        inst = target[3]
        cfg = AdaptConfig(points_per_step=0, aug_sigma=0.0)
        student = teacher.copy()
        report = adapt_step(teacher.copy(), student, inst, cfg, step=2)
        pseudo = decode(teacher.forward(inst.feature)["fused"])
        mask = np.linalg.norm(align_depth(inst.depth, report.pose) - pseudo, axis=1) < cfg.rho
        assert report.kept == mask.sum() > 0
        expected, _ = branch_loss_and_grads(teacher, teacher.lift(inst.feature), discretize(pseudo, 32, "soft"), mask)
        assert report.student_loss == pytest.approx(expected, abs=1e-12)

    def test_teacher_trained_on_aligned_depth(self, teacher, target):
        inst = target[0]
        t = teacher.copy()
        report = adapt_step(t, teacher.copy(), inst, AdaptConfig(), step=1)
        assert report.teacher_loss is not None and t != teacher
        t = teacher.copy()
        adapt_step(t, teacher.copy(), inst, AdaptConfig(teacher_self_supervision=False), step=1)
        assert t == teacher

    def test_gamma_one_leaves_teacher_unchanged(self, teacher, target):
        cfg = naive_cfg(momentum=True, momentum_every=1, momentum_gamma=1.0)
        t = teacher.copy()
        adapt_step(t, teacher.copy(), target[0], cfg, step=1)
        assert t == teacher

    def test_momentum_schedule(self, teacher, target):
        cfg = naive_cfg(momentum=True, momentum_every=2, momentum_gamma=0.5)
        t, s = teacher.copy(), teacher.copy()
        adapt_step(t, s, target[0], cfg, step=1)
        assert t == teacher
        adapt_step(t, s, target[1], cfg, step=2)
        np.testing.assert_allclose(t.flat_weights(), 0.5 * teacher.flat_weights() + 0.5 * s.flat_weights(), atol=1e-15)

    def test_empty_selection_is_skipped(self, teacher, target):
        s = teacher.copy()
        report = adapt_step(teacher.copy(), s, target[0], AdaptConfig(rho=0.0), step=1)
        assert report.skipped == "empty_selection" and report.kept == 0
        assert s == teacher

    def test_degenerate_labels_are_skipped(self, target):
        zero = ToyPredictor()
        s = zero.copy()
        report = adapt_step(zero.copy(), s, target[0], AdaptConfig(), step=1)
        assert report.skipped == "no_consensus"
        assert s == zero

    @pytest.mark.parametrize("mode", FILTER_MODES)
    def test_every_mode_reports_label_errors(self, teacher, target, mode):
        report = adapt_step(teacher.copy(), teacher.copy(), target[4], AdaptConfig(filter_mode=mode), step=1)
        assert report.skipped is None and 0 < report.kept <= report.n_points
        assert report.label_error_all >= 0 and report.label_error_kept >= 0


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_momentum_is_convex_combination(seed, gamma):
    a, b = random_model(seed % 1000, 4, 3), random_model(seed % 1000 + 1, 4, 3)
    wa, wb = a.flat_weights(), b.flat_weights()
    a.momentum_update(b, gamma)
    w = a.flat_weights()
    assert np.all(w >= np.minimum(wa, wb) - 1e-15) and np.all(w <= np.maximum(wa, wb) + 1e-15)


class TestRunAdaptation:
    def test_zero_epochs(self, teacher, target):
        before = teacher.copy()
        student, t, reports = run_adaptation(teacher, target, replace(FAST, epochs=0))
        assert student == teacher and t == teacher and reports == []
        assert teacher == before

    def test_inputs_untouched_and_deterministic(self, teacher, target):
        before = teacher.copy()
        a = run_adaptation(teacher, target, FAST)
        b = run_adaptation(teacher, target, FAST)
        assert teacher == before
        assert a[0] == b[0] and a[1] == b[1]
        assert [r.to_dict() for r in a[2]] == [r.to_dict() for r in b[2]]
        assert a[0] != teacher

    def test_report_fields(self, teacher, target):
        _, _, reports = run_adaptation(teacher, target, replace(FAST, epochs=2))
        assert [r.epoch for r in reports] == [0, 1]
        for r in reports:
            assert r.steps == len(target) and 0 < r.kept_fraction <= 1
            assert r.label_error_kept < r.label_error_all

    def test_classwise_topk_pools_per_class(self, teacher, target):
        _, _, reports = run_adaptation(teacher, target, replace(FAST, filter_mode="topk_classwise"))
        assert reports[0].kept_fraction == pytest.approx(0.5)

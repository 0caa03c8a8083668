"""Teacher pre-training and teacher-student self-training.

Source pre-training minimizes, summed over the three branches::

    lambda_n * H(gt, N_T(x1)) + lambda_c * H(softmax(N_T(x1)), N_T(x2))

where ``x1``, ``x2`` are two independent noise redraws of the features and
the consistency target is held fixed. On the target split each step builds
pseudo labels from the teacher's fused branch, filters them, trains the
student on the kept labels and (for bidirectional filtering) trains the
teacher on the kept aligned depth points with a small learning rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
import logging
import math

import numpy as np

from .errors import NoConsensus, NonFiniteLoss
from .filtering import (
    FILTER_MODES,
    bidirectional_filter,
    ensemble_filter,
    entropy_filter,
    topk_conf,
    topk_conf_classwise,
)
from .geom import RansacConfig, SimilarityPose
from .model import BRANCHES, ToyPredictor
from .nocs import cross_entropy_and_grad, decode, discretize, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    rho: float = 0.05
    lambda_n: float = 1.0
    lambda_c: float = 1e-6
    lr: float = 1.0
    student_lr: float = 2.0
    teacher_lr_target: float = 1.0
    momentum: bool = False
    momentum_gamma: float = 0.999
    momentum_every: int = 100
    teacher_self_supervision: bool = True
    epochs: int = 5
    pretrain_epochs: int = 3
    filter_mode: str = "bidirectional"
    am_loss: bool = True
    k_percent: float = 50.0
    target_mode: str = "soft"
    aug_sigma: float = 0.02
    points_per_step: int = 256
    bins: int = 32
    lift_dim: int = 64
    seed: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.filter_mode not in FILTER_MODES:
            raise ValueError(f"unknown filter_mode {self.filter_mode!r}")
        if self.target_mode not in ("soft", "hard"):
            raise ValueError("target_mode must be 'soft' or 'hard'")
        if not 0.0 <= self.momentum_gamma <= 1.0:
            raise ValueError("momentum_gamma must lie in [0, 1]")
        if self.momentum_every < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch and step counts must be non-negative")
        if isinstance(self.ransac, dict):
            object.__setattr__(self, "ransac", RansacConfig(**self.ransac))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        if "ransac" in d:
            d["ransac"] = RansacConfig(**d["ransac"])
        return cls(**d)


@dataclass
class StepReport:
    instance_id: str
    n_points: int
    kept: int = 0
    skipped: str | None = None
    student_loss: float | None = None
    teacher_loss: float | None = None
    pose: SimilarityPose | None = None
    label_error_all: float | None = None
    label_error_kept: float | None = None


@dataclass
class EpochReport:
    epoch: int
    student_loss: float
    teacher_loss: float | None
    kept_fraction: float
    skipped: int
    steps: int
    label_error_all: float | None = None
    label_error_kept: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{what} is not finite ({value})")
    return value


def branch_loss_and_grads(model: ToyPredictor, lifts: dict, target, mask=None, branches=BRANCHES, weight: float = 1.0):
    """Summed cross-entropy over ``branches`` and its weight gradients."""
    return _loss_and_grads(model, lifts, model.logits_from_lift(lifts, branches), target, mask, weight)


def _loss_and_grads(model, lifts, logits, target, mask=None, weight: float = 1.0):
    loss = 0.0
    dlogits = {}
    for k, z in logits.items():
        ce, g = cross_entropy_and_grad(z, target[k] if isinstance(target, dict) else target, mask)
        loss += weight * ce
        dlogits[k] = weight * g
    return loss, model.weight_grads(lifts, dlogits)


def _add(into: dict, grads: dict) -> dict:
    for k, g in grads.items():
        into[k] = into[k] + g if k in into else g
    return into


def teacher_source_loss(model: ToyPredictor, x1, x2, gt_target, cfg: AdaptConfig, consistency_target=None):
    """Source loss and gradients for one instance.

    ``consistency_target`` defaults to ``softmax`` of the current
    predictions on ``x1``; pass it explicitly to freeze it (gradient checks).
    """
    lifts1 = model.lift(x1)
    logits1 = model.logits_from_lift(lifts1)
    loss, grads = _loss_and_grads(model, lifts1, logits1, gt_target, weight=cfg.lambda_n)
    if cfg.lambda_c > 0:
        if consistency_target is None:
            consistency_target = {k: softmax(logits1[k]) for k in BRANCHES}
        lifts2 = model.lift(x2)
        closs, cgrads = _loss_and_grads(model, lifts2, model.logits_from_lift(lifts2), consistency_target,
                                        weight=cfg.lambda_c)
        loss += closs
        _add(grads, cgrads)
    return loss, grads


def _augment(feature, rng, sigma: float):
    return feature + rng.normal(0.0, sigma, feature.shape) if sigma > 0 else feature


def pretrain_teacher(instances, cfg: AdaptConfig = AdaptConfig(), model: ToyPredictor | None = None):
    """Supervised source training. Returns ``(teacher, per-epoch mean losses)``."""
    model = model.copy() if model is not None else ToyPredictor(cfg.bins, cfg.lift_dim, seed=cfg.seed)
    targets = [discretize(inst.gt_nocs, cfg.bins, cfg.target_mode) for inst in instances]
    curve = []
    for epoch in range(cfg.pretrain_epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        losses = []
        for i in rng.permutation(len(instances)):
            feat = instances[i].feature
            tgt = targets[i]
            if cfg.points_per_step and cfg.points_per_step < len(feat):
                sel = np.sort(rng.choice(len(feat), cfg.points_per_step, replace=False))
                feat, tgt = feat[sel], tgt[sel]
            x1 = _augment(feat, rng, cfg.aug_sigma)
            x2 = _augment(feat, rng, cfg.aug_sigma)
            loss, grads = teacher_source_loss(model, x1, x2, tgt, cfg)
            losses.append(_check_finite(loss, f"source loss at epoch {epoch}"))
            model.apply_update(grads, cfg.lr)
        curve.append(math.fsum(losses) / max(len(losses), 1))
        log.info("pretrain epoch %d loss %.5f", epoch, curve[-1])
    return model, curve


def make_pseudo_labels(teacher: ToyPredictor, instance, branches=BRANCHES):
    """Fused-branch decode plus the logits of ``branches`` (all by default)."""
    branches = tuple(branches) if "fused" in branches else (*branches, "fused")
    logits = teacher.forward(instance.feature, branches)
    return decode(logits["fused"]), logits


def adapt_step(teacher: ToyPredictor, student: ToyPredictor, instance, cfg: AdaptConfig,
               step: int = 1, rng=None, mask_override=None) -> StepReport:
    """One self-training step on one target instance; updates models in place.

    ``step`` is the 1-based global step used for the momentum schedule;
    ``mask_override`` supplies a precomputed keep mask (class-wise top-k).
    """
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 2, step])
    feat = instance.feature
    n = len(feat)
    report = StepReport(instance.instance_id, n)
    x_student = _augment(feat, rng, cfg.aug_sigma)
    mode = cfg.filter_mode
    ensemble = mode in ("softmax_max", "softmax_avg", "argmax_match")
    pseudo, t_logits = make_pseudo_labels(teacher, instance, BRANCHES if ensemble else ("fused",))
    aligned = None
    if mask_override is not None:
        mask = np.asarray(mask_override, dtype=bool)
    elif mode == "none":
        mask = np.ones(n, dtype=bool)
    elif mode == "bidirectional":
        ransac = replace(cfg.ransac, rng_seed=int(np.random.default_rng([cfg.ransac.rng_seed, step]).integers(2**63)))
        try:
            res = bidirectional_filter(pseudo, instance.depth, cfg.rho, ransac)
        except NoConsensus:
            report.skipped = "no_consensus"
            return report
        mask, aligned, report.pose = res.kept_mask, res.aligned, res.pose_used
    elif mode == "topk":
        mask = topk_conf(t_logits["fused"], cfg.k_percent)
    elif mode == "topk_classwise":
        # without the pooled mask from run_adaptation this degrades to per-instance top-k
        mask = topk_conf(t_logits["fused"], cfg.k_percent)
    elif mode == "entropy":
        mask = entropy_filter(t_logits["fused"], cfg.k_percent)
    else:
        pseudo, mask = ensemble_filter(t_logits["A"], t_logits["B"], t_logits["fused"], mode)

    report.kept = int(mask.sum())
    if getattr(instance, "gt_nocs", None) is not None:
        err = np.linalg.norm(pseudo - instance.gt_nocs, axis=1)
        report.label_error_all = float(err.mean())
        report.label_error_kept = float(err[mask].mean()) if report.kept else None
    if report.kept == 0:
        report.skipped = "empty_selection"
        return report

    # gradient steps use a random minibatch of the kept points
    sel = np.flatnonzero(mask)
    if cfg.points_per_step and cfg.points_per_step < len(sel):
        sel = np.sort(rng.choice(sel, cfg.points_per_step, replace=False))
    branches = BRANCHES if cfg.am_loss else ("fused",)
    target = discretize(pseudo[sel], cfg.bins, cfg.target_mode)
    loss, grads = branch_loss_and_grads(student, student.lift(x_student[sel]), target, None, branches)
    report.student_loss = _check_finite(loss, "student loss")
    student.apply_update(grads, cfg.student_lr)

    if aligned is not None and cfg.teacher_self_supervision and cfg.teacher_lr_target > 0:
        depth_target = discretize(np.clip(aligned[sel], 0.0, 1.0), cfg.bins, cfg.target_mode)
        loss, grads = branch_loss_and_grads(teacher, teacher.lift(feat[sel]), depth_target, None, branches)
        report.teacher_loss = _check_finite(loss, "teacher loss")
        teacher.apply_update(grads, cfg.teacher_lr_target)

    if cfg.momentum and step % cfg.momentum_every == 0:
        teacher.momentum_update(student, cfg.momentum_gamma)
    return report


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def run_adaptation(teacher: ToyPredictor, instances, cfg: AdaptConfig = AdaptConfig(), student: ToyPredictor | None = None):
    """Self-train on target instances for ``cfg.epochs`` epochs.

    The input models are not modified. The student starts as a copy of the
    teacher unless given. Returns ``(student, teacher, epoch_reports)``.
    Label errors in the reports use ground truth for evaluation only.
    """
    teacher = teacher.copy()
    student = student.copy() if student is not None else teacher.copy()
    reports = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        order = rng.permutation(len(instances))
        overrides = {}
        if cfg.filter_mode == "topk_classwise":
            logits = [teacher.forward(inst.feature, ("fused",))["fused"] for inst in instances]
            masks = topk_conf_classwise(logits, [inst.class_id for inst in instances], cfg.k_percent)
            overrides = dict(enumerate(masks))
        step_reports = []
        for i in order:
            step += 1
            step_reports.append(
                adapt_step(teacher, student, instances[i], cfg, step, rng, overrides.get(int(i)))
            )
        done = [r for r in step_reports if r.skipped is None]
        kept_total = sum(r.kept for r in step_reports)
        n_total = sum(r.n_points for r in step_reports)
        err_all = [r.label_error_all * r.n_points for r in step_reports if r.label_error_all is not None]
        err_kept = [r.label_error_kept * r.kept for r in step_reports if r.label_error_kept is not None]
        reports.append(
            EpochReport(
                epoch=epoch,
                student_loss=_mean([r.student_loss for r in done]),
                teacher_loss=_mean([r.teacher_loss for r in done]),
                kept_fraction=kept_total / n_total if n_total else 0.0,
                skipped=len(step_reports) - len(done),
                steps=len(step_reports),
                label_error_all=math.fsum(err_all) / n_total if err_all else None,
                label_error_kept=math.fsum(err_kept) / kept_total if err_kept and kept_total else None,
            )
        )
        log.info("adapt epoch %d: %s", epoch, reports[-1])
    return student, teacher, reports

"""Benchmarks on in-memory synthetic data.

:func:`run_benchmark` pretrains on the source split, adapts on the target
split and scores pose accuracy on a held-out target split.
:func:`corruption_benchmark` measures how well each pseudo-label filter
recovers the clean points of instances whose labels were partly replaced by
uniform noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging

import numpy as np

from .adapt import EpochReport, pretrain_teacher, run_adaptation
from .config import SPLITS, ExperimentConfig
from .errors import NoConsensus
from .filtering import (
    DEFAULT_K,
    DEFAULT_RHO,
    bidirectional_filter,
    ensemble_filter,
    entropy_filter,
    topk_conf,
    topk_conf_classwise,
)
from .geom import RansacConfig
from .metrics import pose_accuracy
from .nocs import DEFAULT_BINS, bin_centers
from .pipeline import ground_truth_records, predict_detections
from .synth import CLASS_NAMES, NoiseModel, generate_instances

log = logging.getLogger(__name__)


def make_splits(cfg: ExperimentConfig) -> dict:
    """``{split: instances}`` for every split, generated from the run seed."""
    out = {}
    for split in SPLITS:
        count, noise = cfg.split_plan(split)
        out[split] = generate_instances(cfg.classes, count, noise, cfg.split_seed(split), cfg.n_points, prefix=split)
    return out


def accuracy(model, instances, cfg: ExperimentConfig, max_degrees: float = 10.0, max_meters: float = 0.10) -> float:
    """Fraction of instances whose solved pose meets both thresholds."""
    preds = predict_detections(model, instances, cfg.ransac)
    return pose_accuracy(preds, ground_truth_records(instances), max_degrees, max_meters)


@dataclass
class BenchmarkResult:
    seed: int
    teacher_accuracy: float
    student_accuracy: dict = field(default_factory=dict)
    epoch_reports: dict = field(default_factory=dict)
    pretrain_curve: list = field(default_factory=list)

    def improved(self, mode: str = "bidirectional", baseline: str = "none") -> bool:
        acc = self.student_accuracy[mode]
        return acc > self.teacher_accuracy and acc > self.student_accuracy[baseline]

    def filter_helps(self, mode: str = "bidirectional") -> bool:
        """Kept-point label error below all-point error at every epoch."""
        reports: list[EpochReport] = self.epoch_reports[mode]
        return bool(reports) and all(
            r.label_error_kept is not None and r.label_error_kept < r.label_error_all for r in reports
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "teacher_accuracy": self.teacher_accuracy,
            "student_accuracy": self.student_accuracy,
            "pretrain_curve": self.pretrain_curve,
            "epoch_reports": {m: [r.to_dict() for r in rs] for m, rs in self.epoch_reports.items()},
        }


def run_benchmark(cfg: ExperimentConfig, modes=("bidirectional", "none"), splits=None) -> BenchmarkResult:
    """Pretrain on source, adapt on target with each mode, score on held-out target.

    Accuracy is the 10 degree / 10 cm pose accuracy.
    """
    splits = splits or make_splits(cfg)
    teacher, curve = pretrain_teacher(splits["source"], cfg.adapt)
    test = splits["target_test"]
    result = BenchmarkResult(cfg.seed, accuracy(teacher, test, cfg), pretrain_curve=curve)
    for mode in modes:
        student, _, reports = run_adaptation(teacher, splits["target"], replace(cfg.adapt, filter_mode=mode))
        result.student_accuracy[mode] = accuracy(student, test, cfg)
        result.epoch_reports[mode] = reports
        log.info("seed %d mode %s accuracy %.3f", cfg.seed, mode, result.student_accuracy[mode])
    return result


# -- filter benchmark --------------------------------------------------------

CORRUPTION_NOISE = NoiseModel(depth_sigma=0.001, label_outlier_fraction=0.2)
BASELINES = ("topk", "topk_classwise", "entropy", "softmax_max", "softmax_avg", "argmax_match")


def synthetic_branch_logits(pseudo, corrupted, rng, bins: int = DEFAULT_BINS, branch_noise: float = 0.25) -> dict:
    """Teacher-like logits peaked at each pseudo label.

    The fused branch is a discretized Gaussian around the label whose width
    is drawn per point; corrupted points are only slightly wider, so
    confidence is a weak hint of corruption. Branches ``A`` and ``B`` are the
    fused logits plus independent Gaussian noise.
    """
    pseudo = np.asarray(pseudo, dtype=float)
    n = len(pseudo)
    width = rng.uniform(0.5, 2.0, n) / bins
    width = np.where(corrupted, width * 1.2, width)
    d = bin_centers(bins)[None, None, :] - pseudo[:, :, None]
    fused = -0.5 * (d / width[:, None, None]) ** 2
    return {
        "A": fused + rng.normal(0.0, branch_noise, fused.shape),
        "B": fused + rng.normal(0.0, branch_noise, fused.shape),
        "fused": fused,
    }


def f1_score(kept, clean) -> float:
    kept = np.asarray(kept, dtype=bool)
    clean = np.asarray(clean, dtype=bool)
    tp = np.count_nonzero(kept & clean)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(kept)
    recall = tp / np.count_nonzero(clean)
    return 2 * precision * recall / (precision + recall)


def corruption_benchmark(seed: int, n_instances: int = 200, k_percent: float = DEFAULT_K, rho: float = DEFAULT_RHO,
                         n_points: int = 1024, noise: NoiseModel = CORRUPTION_NOISE,
                         ransac: RansacConfig | None = None, classes=CLASS_NAMES) -> dict:
    """Clean-mask F1 of every filter, pooled over all points of all instances.

    Returns ``{mode: f1}`` for ``bidirectional`` and the six baselines.
    """
    ransac = ransac or RansacConfig(rng_seed=seed)
    instances = generate_instances(classes, n_instances, noise, seed, n_points, prefix="corrupt")
    rng = np.random.default_rng([seed, 11])
    logits = [synthetic_branch_logits(i.label_nocs, i.label_outlier_mask, rng) for i in instances]
    clean = np.concatenate([~i.label_outlier_mask for i in instances])
    kept = {m: [] for m in ("bidirectional", *BASELINES)}
    classwise = topk_conf_classwise([lg["fused"] for lg in logits], [i.class_id for i in instances], k_percent)
    for inst, lg, cw in zip(instances, logits, classwise):
        try:
            mask = bidirectional_filter(inst.label_nocs, inst.depth, rho, ransac).kept_mask
        except NoConsensus:
            mask = np.zeros(inst.n_points, dtype=bool)
        kept["bidirectional"].append(mask)
        kept["topk"].append(topk_conf(lg["fused"], k_percent))
        kept["topk_classwise"].append(cw)
        kept["entropy"].append(entropy_filter(lg["fused"], k_percent))
        for mode in ("softmax_max", "softmax_avg", "argmax_match"):
            kept[mode].append(ensemble_filter(lg["A"], lg["B"], lg["fused"], mode)[1])
    return {m: f1_score(np.concatenate(v), clean) for m, v in kept.items()}

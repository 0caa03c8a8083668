"""Pseudo-label filters.

:func:`bidirectional_filter` uses the observed depth: it solves a pose
between pseudo labels and depth, maps depth back into NOCS space and keeps
points whose label agrees with the aligned depth. The remaining filters only
look at the teacher's logits and serve as baselines.

All selections break ties toward the lower point index.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np

from .errors import ShapeMismatch, UnknownClass
from .geom import RansacConfig, SimilarityPose, align_depth, as_points, ransac_pose
from .nocs import as_nocs, decode, decode_probs, entropy, softmax

DEFAULT_RHO = 0.05
DEFAULT_K = 50.0

FILTER_MODES = (
    "bidirectional",
    "topk",
    "topk_classwise",
    "entropy",
    "softmax_max",
    "softmax_avg",
    "argmax_match",
    "none",
)


@dataclass(frozen=True)
class FilterResult:
    kept_mask: np.ndarray
    distances: np.ndarray
    pose_used: SimilarityPose
    rho: float
    aligned: np.ndarray

    @property
    def kept_count(self) -> int:
        return int(self.kept_mask.sum())

    @property
    def empty(self) -> bool:
        return self.kept_count == 0

    def to_dict(self) -> dict:
        return {
            "kept_mask": self.kept_mask.astype(int).tolist(),
            "kept_count": self.kept_count,
            "distances": self.distances.tolist(),
            "pose_used": self.pose_used.to_dict(),
            "rho": self.rho,
        }


def bidirectional_filter(pseudo, depth, rho: float = DEFAULT_RHO, cfg: RansacConfig | None = None) -> FilterResult:
    """Keep points where aligned depth and pseudo label agree within ``rho``.

    The pose comes from RANSAC/Umeyama on ``(pseudo, depth)``; depth is
    mapped into NOCS space with the inverse pose and ``d(n)`` is the
    Euclidean distance to the pseudo label. The same mask selects both the
    refined labels and the filtered depth. An empty result is returned, not
    raised; :class:`NoConsensus` from the pose solve propagates.
    """
    pseudo = as_nocs(pseudo)
    depth = as_points(depth, "depth")
    if pseudo.shape != depth.shape:
        raise ShapeMismatch(f"pseudo labels {pseudo.shape} vs depth {depth.shape}")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    pose, _ = ransac_pose(pseudo, depth, cfg)
    aligned = align_depth(depth, pose)
    dist = np.linalg.norm(aligned - pseudo, axis=1)
    return FilterResult(dist < rho, dist, pose, float(rho), aligned)


def keep_count(n: int, k_percent: float) -> int:
    if not 0 < k_percent <= 100:
        raise ValueError(f"k must lie in (0, 100], got {k_percent}")
    return math.ceil(Fraction(n) * Fraction(k_percent) / 100)


def _keep_top(scores: np.ndarray, count: int) -> np.ndarray:
    """Mask of the ``count`` highest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:count]] = True
    return mask


def confidence(logits) -> np.ndarray:
    """Product over axes of the maximum softmax probability."""
    return softmax(logits).max(axis=2).prod(axis=1)


def topk_conf(logits, k_percent: float = DEFAULT_K) -> np.ndarray:
    scores = confidence(logits)
    return _keep_top(scores, keep_count(len(scores), k_percent))


def topk_conf_classwise(logits_list, class_ids, k_percent: float = DEFAULT_K, classes=None) -> list[np.ndarray]:
    """Top-k confidence selection pooled over every instance of a class."""
    if len(logits_list) != len(class_ids):
        raise ShapeMismatch("one class id is required per instance")
    if classes is not None:
        known = set(classes)
        for c in class_ids:
            if c not in known:
                raise UnknownClass(c)
    scores = [confidence(lg) for lg in logits_list]
    masks = [np.zeros(len(s), dtype=bool) for s in scores]
    for cls in dict.fromkeys(class_ids):
        members = [i for i, c in enumerate(class_ids) if c == cls]
        pooled = np.concatenate([scores[i] for i in members])
        if len(pooled) == 0:
            continue
        keep = _keep_top(pooled, keep_count(len(pooled), k_percent))
        offset = 0
        for i in members:
            masks[i] = keep[offset:offset + len(scores[i])]
            offset += len(scores[i])
    return masks


def entropy_filter(logits, k_percent: float = DEFAULT_K) -> np.ndarray:
    """Keep the ``k`` percent of points with the lowest total entropy."""
    ent = entropy(logits)
    return _keep_top(-ent, keep_count(len(ent), k_percent))


def ensemble_filter(l2d, l3d, lfused, mode: str):
    """Combine the three branch predictions into one pseudo label.

    ``softmax_max`` takes, per point and axis, the branch with the most
    confident distribution; ``softmax_avg`` averages the three
    distributions; both keep every point. ``argmax_match`` keeps a point only
    if all branches agree on the argmax bin of every axis and labels it with
    the fused decode. Returns ``(pseudo, kept_mask)``.
    """
    l2d, l3d, lfused = (np.asarray(x, dtype=float) for x in (l2d, l3d, lfused))
    if not (l2d.shape == l3d.shape == lfused.shape) or lfused.ndim != 3:
        raise ShapeMismatch(f"branch shapes differ: {l2d.shape}, {l3d.shape}, {lfused.shape}")
    n = len(lfused)
    # fused first so that ties resolve to it
    probs = np.stack([softmax(lfused), softmax(l2d), softmax(l3d)])
    if mode == "softmax_max":
        pick = probs.max(axis=3).argmax(axis=0)
        chosen = np.take_along_axis(probs, pick[None, :, :, None], axis=0)[0]
        return decode_probs(chosen), np.ones(n, dtype=bool)
    if mode == "softmax_avg":
        return decode_probs(probs.mean(axis=0)), np.ones(n, dtype=bool)
    if mode == "argmax_match":
        am = probs.argmax(axis=3)
        keep = np.all((am[0] == am[1]) & (am[0] == am[2]), axis=1)
        return decode(lfused), keep
    raise ValueError(f"unknown ensemble mode {mode!r}")

"""Binned NOCS encoding, cross-entropy losses and pose/size recovery.

Logit and target maps are ``(n, 3, B)`` arrays: one B-way categorical per
point and axis. Bin ``k`` is centered at ``(k + 0.5) / B``.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInput, EmptySelection, ShapeMismatch
from .geom import RansacConfig, SimilarityPose, ransac_pose

DEFAULT_BINS = 32


def as_nocs(coords) -> np.ndarray:
    """Validate an ``(n, 3)`` NOCS map and clamp it into the unit cube."""
    c = np.asarray(coords, dtype=float)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"NOCS map must have shape (n, 3), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("NOCS map contains non-finite values")
    return np.clip(c, 0.0, 1.0)


def bin_centers(bins: int) -> np.ndarray:
    return (np.arange(bins) + 0.5) / bins


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def discretize(coords, bins: int = DEFAULT_BINS, mode: str = "hard") -> np.ndarray:
    """Encode coordinates in ``[0, 1]`` as per-axis bin distributions.

    ``hard`` puts all mass on bin ``floor(c * B)`` (clamped to ``B - 1``);
    ``soft`` splits it linearly between the two nearest bin centers.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    c = as_nocs(coords)
    n = len(c)
    out = np.zeros((n, 3, bins))
    if mode == "hard":
        k = np.minimum(np.floor(c * bins).astype(int), bins - 1)
        np.put_along_axis(out, k[..., None], 1.0, axis=2)
        return out
    if mode != "soft":
        raise ValueError(f"unknown discretize mode {mode!r}")
    u = np.clip(c * bins - 0.5, 0.0, bins - 1.0)
    lo = np.minimum(np.floor(u).astype(int), bins - 2)
    frac = u - lo
    np.put_along_axis(out, lo[..., None], (1.0 - frac)[..., None], axis=2)
    np.put_along_axis(out, (lo + 1)[..., None], frac[..., None], axis=2)
    return out


def decode(logits) -> np.ndarray:
    """Expectation decoding: softmax-weighted mean of bin centers."""
    p = softmax(logits)
    return np.clip(p @ bin_centers(p.shape[-1]), 0.0, 1.0)


def decode_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return np.clip(probs @ bin_centers(probs.shape[-1]), 0.0, 1.0)


def _check(pred, target, mask):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones(len(pred), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(pred),):
            raise ShapeMismatch(f"mask shape {mask.shape} does not match {len(pred)} points")
    count = int(mask.sum())
    if count == 0:
        raise EmptySelection("mask excludes every point")
    return pred, target, mask, count


def point_cross_entropy(pred, target) -> np.ndarray:
    """Per-point cross-entropy summed over the three axes."""
    return -np.einsum("nab,nab->n", np.asarray(target, float), log_softmax(pred))


def cross_entropy(pred, target, mask=None) -> float:
    """Mean over unmasked points of ``H(target, softmax(pred))`` (nats)."""
    pred, target, mask, count = _check(pred, target, mask)
    per_point = point_cross_entropy(pred[mask], target[mask])
    return math.fsum(per_point) / count


def cross_entropy_grad(pred, target, mask=None) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to the logits."""
    pred, target, mask, count = _check(pred, target, mask)
    grad = (softmax(pred) - target) / count
    grad[~mask] = 0.0
    return grad


def cross_entropy_and_grad(pred, target, mask=None):
    """``(cross_entropy, cross_entropy_grad)`` sharing one log-softmax."""
    pred, target, mask, count = _check(pred, target, mask)
    logp = log_softmax(pred)
    per_point = -np.einsum("nab,nab->n", target[mask], logp[mask])
    grad = (np.exp(logp) - target) / count
    grad[~mask] = 0.0
    return math.fsum(per_point) / count, grad


def entropy(logits) -> np.ndarray:
    """Per-point Shannon entropy summed over axes."""
    logp = log_softmax(logits)
    return -np.einsum("nab,nab->n", np.exp(logp), logp)


def consistency_loss(pred, pred_aug) -> float:
    """``H(softmax(pred), softmax(pred_aug))``; ``pred`` acts as a fixed target."""
    pred = np.asarray(pred, dtype=float)
    return cross_entropy(pred_aug, softmax(pred))


def consistency_grad(pred, pred_aug) -> np.ndarray:
    """Gradient of :func:`consistency_loss` with respect to ``pred_aug`` only."""
    return cross_entropy_grad(pred_aug, softmax(pred))


def size_from_nocs(nocs, scale: float) -> np.ndarray:
    c = as_nocs(nocs)
    return scale * (c.max(axis=0) - c.min(axis=0))


def pose_and_size(nocs, depth, cfg: RansacConfig | None = None):
    """Solve pose by RANSAC/Umeyama; size = scale x extent of inlier NOCS.

    Returns ``(pose, size, inlier_mask)``.
    """
    c = as_nocs(nocs)
    if len(c) < 2:
        raise DegenerateInput("pose needs more than one point")
    pose, mask = ransac_pose(c, depth, cfg)
    return pose, size_from_nocs(c[mask], pose.scale), mask


def object_center(pose: SimilarityPose) -> np.ndarray:
    """Camera-frame position of the NOCS cube center."""
    return pose.apply(np.full((1, 3), 0.5))[0]

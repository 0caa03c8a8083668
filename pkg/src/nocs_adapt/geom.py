"""Similarity transforms, Umeyama alignment and RANSAC pose estimation.

Points are ``(n, 3)`` float arrays. A NOCS map is treated as the source
point set and observed depth points as the destination, so a pose maps
``depth ~= scale * rotation @ nocs + translation``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NoConsensus

_RANK_TOL = 1e-9


@dataclass(frozen=True)
class SymmetrySpec:
    """Rotational symmetry of a category about one object axis.

    ``kind`` is ``"none"``, ``"continuous"`` or ``"discrete"``; ``order`` is
    the fold count for discrete symmetry.
    """

    kind: str = "none"
    axis: int = 2
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "continuous", "discrete"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        if self.axis not in (0, 1, 2):
            raise ValueError("symmetry axis must be 0, 1 or 2")
        if self.kind == "discrete" and self.order < 1:
            raise ValueError("discrete symmetry needs order >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "axis": self.axis, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict) -> "SymmetrySpec":
        return cls(d.get("kind", "none"), int(d.get("axis", 2)), int(d.get("order", 1)))


NO_SYMMETRY = SymmetrySpec()
Z_CONTINUOUS = SymmetrySpec("continuous", 2)


@dataclass(frozen=True)
class SimilarityPose:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "SimilarityPose":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points) -> np.ndarray:
        """Map object/NOCS points into the camera frame."""
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation / self.scale

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityPose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]), d["scale"])


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 500
    inlier_threshold: float = 0.02
    min_sample: int = 4
    confidence: float = 0.999
    rng_seed: int = 0
    max_refinements: int = 10

    def __post_init__(self):
        if self.min_sample < 3:
            raise ValueError("min_sample must be >= 3")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def as_points(points, name: str = "points") -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return p


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation; ``axis`` may be an index 0-2 or a 3-vector."""
    if isinstance(axis, (int, np.integer)):
        k = np.zeros(3)
        k[axis] = 1.0
    else:
        k = np.asarray(axis, dtype=float)
        k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def umeyama(src, dst) -> SimilarityPose:
    """Least-squares similarity transform with ``dst ~= s * R @ src + t``.

    Uses the reflection-corrected SVD solution, so the rotation is always
    proper. Raises :class:`DegenerateInput` when fewer than three points are
    given or the centered source has rank below two.
    """
    src = as_points(src, "src")
    dst = as_points(dst, "dst")
    if src.shape != dst.shape:
        raise ValueError(f"src/dst shape mismatch: {src.shape} vs {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[0] <= 1e-300 or sv[1] <= _RANK_TOL * sv[0]:
        raise DegenerateInput("source points are coincident or collinear")

    cov = dc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = (u * sign) @ vt
    var_s = np.einsum("ij,ij->", sc, sc) / n
    scale = float(np.dot(d, sign) / var_s)
    if not scale > 0:
        raise DegenerateInput("destination points collapse to a single point")
    trans = mu_d - scale * rot @ mu_s
    return SimilarityPose(rot, trans, scale)


def _umeyama_batch(src: np.ndarray, dst: np.ndarray):
    """Vectorized Umeyama over ``(b, m, 3)`` samples.

    Returns rotation ``(b, 3, 3)``, scale ``(b,)``, translation ``(b, 3)``
    and a validity mask; degenerate samples are flagged, not raised.
    """
    m = src.shape[1]
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    sc = src - mu_s
    dc = dst - mu_d
    sv = np.linalg.svd(sc, compute_uv=False)
    valid = (sv[:, 0] > 1e-300) & (sv[:, 1] > _RANK_TOL * sv[:, 0])
    cov = np.einsum("bmi,bmj->bij", dc, sc) / m
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones((len(src), 3))
    sign[np.linalg.det(u) * np.linalg.det(vt) < 0, 2] = -1.0
    rot = (u * sign[:, None, :]) @ vt
    var_s = np.einsum("bmi,bmi->b", sc, sc) / m
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.einsum("bi,bi->b", d, sign) / var_s
    valid &= np.isfinite(scale) & (scale > 0)
    scale = np.where(valid, scale, 1.0)
    trans = mu_d[:, 0] - scale[:, None] * np.einsum("bij,bj->bi", rot, mu_s[:, 0])
    return rot, scale, trans, valid


def residuals(pose: SimilarityPose, nocs, depth) -> np.ndarray:
    """Per-point camera-frame distance ``|depth_i - pose(nocs_i)|``."""
    return np.linalg.norm(np.asarray(depth, float) - pose.apply(nocs), axis=1)


def _required_iterations(inlier_ratio: float, sample: int, confidence: float) -> float:
    good = inlier_ratio**sample
    if good >= 1.0:
        return 1
    if good <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log1p(-good))


def ransac_pose(nocs, depth, cfg: RansacConfig | None = None, chunk: int = 64):
    """Robust similarity pose between a NOCS map and depth points.

    Hypotheses come from random ``cfg.min_sample``-point subsets and are
    ranked by inlier count, then lower total inlier residual, then earlier
    index. The best consensus set is refit with :func:`umeyama` until the
    inlier set stops changing. Hypotheses are drawn and scored in chunks,
    but the stream of samples and the early-exit decision are identical to
    a one-at-a-time loop, so results depend only on ``cfg.rng_seed``.

    Returns ``(pose, inlier_mask)`` where the mask is recomputed against the
    returned pose.
    """
    cfg = cfg or RansacConfig()
    nocs = as_points(nocs, "nocs")
    depth = as_points(depth, "depth")
    if nocs.shape != depth.shape:
        raise ValueError(f"nocs/depth shape mismatch: {nocs.shape} vs {depth.shape}")
    n = len(nocs)
    m = cfg.min_sample
    if n < m:
        raise DegenerateInput(f"need at least {m} points, got {n}")
    thr = cfg.inlier_threshold
    rng = np.random.default_rng(cfg.rng_seed)
    nocs_t, depth_t = nocs.T.copy(), depth.T.copy()

    best_key = None
    best_mask = None
    required = cfg.max_iterations
    done = 0
    while done < min(required, cfg.max_iterations):
        b = min(chunk, cfg.max_iterations - done)
        idx = np.argpartition(rng.random((b, n)), m - 1, axis=1)[:, :m]
        rot, scale, trans, valid = _umeyama_batch(nocs[idx], depth[idx])
        # one (3b x 3) @ (3 x n) product scores the whole chunk
        diff = ((rot * scale[:, None, None]).reshape(-1, 3) @ nocs_t).reshape(b, 3, n)
        diff += trans[:, :, None]
        diff -= depth_t
        res = np.sqrt(np.einsum("bin,bin->bn", diff, diff))
        inl = res < thr
        counts = inl.sum(axis=1)
        sums = np.where(inl, res, 0.0).sum(axis=1)
        # only hypotheses at least as good as the current best can change it
        floor = m if best_key is None else max(m, best_key[0])
        for j in np.flatnonzero(valid & (counts >= floor)):
            if done + j >= required:
                break
            key = (int(counts[j]), float(sums[j]))
            if best_key is None or key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
                best_key = key
                best_mask = inl[j].copy()
                required = min(required, _required_iterations(key[0] / n, m, cfg.confidence))
        done += b

    if best_mask is None:
        raise NoConsensus(f"no hypothesis reached {m} inliers at threshold {thr}")

    mask = best_mask
    pose = umeyama(nocs[mask], depth[mask])
    for _ in range(cfg.max_refinements):
        new = residuals(pose, nocs, depth) < thr
        if new.sum() < m or np.array_equal(new, mask):
            break
        mask = new
        pose = umeyama(nocs[mask], depth[mask])
    return pose, residuals(pose, nocs, depth) < thr


def align_depth(depth, pose: SimilarityPose) -> np.ndarray:
    """Map depth points into NOCS space: ``(1/s) R^T (p - t)``."""
    return pose.inverse_apply(as_points(depth, "depth"))


def _rotation_angle_deg(rel: np.ndarray) -> float:
    """Angle of rotation ``rel``; atan2 keeps precision near 0 and 180 degrees."""
    skew = rel - rel.T
    sin2 = math.hypot(skew[2, 1], skew[0, 2], skew[1, 0])
    return math.degrees(math.atan2(sin2, np.trace(rel) - 1.0))


def _vector_angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    return math.degrees(math.atan2(np.linalg.norm(np.cross(u, v)), float(u @ v)))


def geodesic_rotation_error(a, b, symmetry: SymmetrySpec = NO_SYMMETRY) -> float:
    """Angle in degrees between rotations ``a`` and ``b``.

    For symmetric objects the error is minimized over rotations of ``b``
    about its symmetry axis (in the object frame). Continuous symmetry uses
    the closed form: the angle between the two rotated symmetry axes.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if symmetry.kind == "continuous":
        return _vector_angle_deg(a[:, symmetry.axis], b[:, symmetry.axis])
    if symmetry.kind == "discrete" and symmetry.order > 1:
        return min(
            _rotation_angle_deg(a @ (b @ rotation_about_axis(symmetry.axis, 2 * math.pi * j / symmetry.order)).T)
            for j in range(symmetry.order)
        )
    return _rotation_angle_deg(a @ b.T)


def closest_symmetric_rotation(target, rot, symmetry: SymmetrySpec = NO_SYMMETRY) -> np.ndarray:
    """Symmetry-equivalent of ``rot`` closest to ``target``."""
    target = np.asarray(target, dtype=float)
    rot = np.asarray(rot, dtype=float)
    if symmetry.kind == "continuous":
        # trace(target^T rot R(theta)) = A cos + B sin + C; recover A, B from three samples
        k = symmetry.axis
        m = target.T @ rot
        f0, f90, f180 = (np.trace(m @ rotation_about_axis(k, a)) for a in (0.0, math.pi / 2, math.pi))
        c = (f0 + f180) / 2
        theta = math.atan2(f90 - c, (f0 - f180) / 2)
        return rot @ rotation_about_axis(k, theta)
    if symmetry.kind == "discrete" and symmetry.order > 1:
        cands = [rot @ rotation_about_axis(symmetry.axis, 2 * math.pi * j / symmetry.order) for j in range(symmetry.order)]
        return min(cands, key=lambda r: geodesic_rotation_error(target, r))
    return rot

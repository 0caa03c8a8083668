"""Category-level pose evaluation: 3D IoU and rotation/translation AP.

A box is described by a similarity pose and a size vector: its center is
the pose applied to the NOCS cube center ``(0.5, 0.5, 0.5)``, its axes are
the pose rotation and its extents are the size. Translation error is the
distance between predicted and ground-truth box centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np
from scipy.stats import qmc

from .geom import NO_SYMMETRY, SimilarityPose, SymmetrySpec, closest_symmetric_rotation, geodesic_rotation_error
from .nocs import object_center

IOU_THRESHOLDS = (0.25, 0.50, 0.75)
POSE_THRESHOLDS = ((5.0, 0.05), (10.0, 0.05), (10.0, 0.10))


@dataclass(frozen=True)
class DetectionRecord:
    instance_id: str
    class_id: str
    pose: SimilarityPose
    size: np.ndarray
    confidence: float = 1.0
    scene_id: str | None = None

    @property
    def scene(self) -> str:
        return self.scene_id if self.scene_id is not None else self.instance_id

    def to_dict(self) -> dict:
        d = {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "pose": self.pose.to_dict(),
            "size": np.asarray(self.size, dtype=float).tolist(),
            "confidence": float(self.confidence),
        }
        if self.scene_id is not None:
            d["scene_id"] = self.scene_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionRecord":
        return cls(d["instance_id"], d["class_id"], SimilarityPose.from_dict(d["pose"]),
                   np.asarray(d["size"], dtype=float), float(d.get("confidence", 1.0)), d.get("scene_id"))


@dataclass(frozen=True)
class GroundTruthRecord:
    instance_id: str
    class_id: str
    pose: SimilarityPose
    size: np.ndarray
    symmetry: SymmetrySpec = NO_SYMMETRY
    scene_id: str | None = None

    @property
    def scene(self) -> str:
        return self.scene_id if self.scene_id is not None else self.instance_id

    def to_dict(self) -> dict:
        d = {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "pose": self.pose.to_dict(),
            "size": np.asarray(self.size, dtype=float).tolist(),
            "symmetry": self.symmetry.to_dict(),
        }
        if self.scene_id is not None:
            d["scene_id"] = self.scene_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthRecord":
        return cls(d["instance_id"], d["class_id"], SimilarityPose.from_dict(d["pose"]),
                   np.asarray(d["size"], dtype=float), SymmetrySpec.from_dict(d.get("symmetry", {})),
                   d.get("scene_id"))


def _inside(points, center, rot, size) -> np.ndarray:
    local = (points - center) @ rot
    return np.all(np.abs(local) <= np.asarray(size) / 2, axis=1)


@lru_cache(maxsize=4)
def _unit_samples(resolution: int) -> np.ndarray:
    """``resolution**3`` Halton points in the centered unit cube.

    A low-discrepancy set has no preferred phase, so faces that are parallel
    to the sampling axes do not cost half a cell as a regular lattice does.
    """
    points = qmc.Halton(d=3, scramble=False).random(resolution**3 + 1)[1:] - 0.5
    points.flags.writeable = False
    return points


def _box_samples(center, rot, size, resolution: int) -> np.ndarray:
    """Deterministic sample points filling the box."""
    return center + (_unit_samples(resolution) * size) @ rot.T


def box_iou_3d(pose_a: SimilarityPose, size_a, pose_b: SimilarityPose, size_b, resolution: int = 50) -> float:
    """IoU of two oriented boxes by deterministic sampling.

    Each box is filled with ``resolution**3`` low-discrepancy points in its own frame;
    the fraction falling inside the other box, times the box volume,
    estimates the intersection. The two estimates are averaged, so the
    result is symmetric in its arguments.
    """
    if resolution < 10:
        raise ValueError("resolution must be >= 10")
    size_a = np.asarray(size_a, dtype=float)
    size_b = np.asarray(size_b, dtype=float)
    if np.any(size_a <= 0) or np.any(size_b <= 0):
        raise ValueError("box sizes must be positive")
    ca, cb = object_center(pose_a), object_center(pose_b)
    ra, rb = pose_a.rotation, pose_b.rotation
    # cheap exact rejection by bounding spheres
    if np.linalg.norm(ca - cb) > (np.linalg.norm(size_a) + np.linalg.norm(size_b)) / 2:
        return 0.0
    vol_a, vol_b = float(np.prod(size_a)), float(np.prod(size_b))
    frac_a = np.count_nonzero(_inside(_box_samples(ca, ra, size_a, resolution), cb, rb, size_b)) / resolution**3
    frac_b = np.count_nonzero(_inside(_box_samples(cb, rb, size_b, resolution), ca, ra, size_a)) / resolution**3
    inter = (frac_a * vol_a + frac_b * vol_b) / 2
    return inter / (vol_a + vol_b - inter)


def pose_error(pred: DetectionRecord, gt: GroundTruthRecord):
    """``(rotation error in degrees, center distance in meters)``."""
    rot = geodesic_rotation_error(pred.pose.rotation, gt.pose.rotation, gt.symmetry)
    trans = float(np.linalg.norm(object_center(pred.pose) - object_center(gt.pose)))
    return rot, trans


def symmetric_iou(pred: DetectionRecord, gt: GroundTruthRecord, resolution: int = 50) -> float:
    """IoU after spinning the prediction to its closest symmetric equivalent."""
    rot = closest_symmetric_rotation(gt.pose.rotation, pred.pose.rotation, gt.symmetry)
    if rot is pred.pose.rotation:
        pose = pred.pose
    else:
        # keep the box center fixed while spinning
        center = object_center(pred.pose)
        trans = center - pred.pose.scale * rot @ np.full(3, 0.5)
        pose = SimilarityPose(rot, trans, pred.pose.scale)
    return box_iou_3d(pose, pred.size, gt.pose, gt.size, resolution)


@dataclass(frozen=True)
class IoUCriterion:
    threshold: float
    resolution: int = 50

    @property
    def name(self) -> str:
        return f"IoU{round(self.threshold * 100)}"

    def score(self, pred, gt):
        """Return ``(passes, quality)``; higher quality is better."""
        iou = symmetric_iou(pred, gt, self.resolution)
        return iou >= self.threshold, iou


@dataclass(frozen=True)
class PoseCriterion:
    max_degrees: float
    max_meters: float

    @property
    def name(self) -> str:
        return f"{self.max_degrees:g}\u00b0{self.max_meters * 100:g}cm"

    def score(self, pred, gt):
        rot, trans = pose_error(pred, gt)
        return rot <= self.max_degrees and trans <= self.max_meters, -(rot / self.max_degrees + trans / self.max_meters)


def all_point_ap(tp_flags, n_gt: int) -> float:
    """Area under the interpolated precision/recall curve (all points)."""
    if n_gt == 0:
        return 0.0
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_class(preds, gts, criterion) -> list[bool]:
    """Greedy matching in descending confidence; returns TP flags in that order.

    Ties in confidence are broken by instance id. Each prediction takes the
    best-quality unmatched ground truth of the same scene that passes the
    criterion.
    """
    order = sorted(preds, key=lambda p: (-p.confidence, p.instance_id))
    by_scene = {}
    for j, g in enumerate(gts):
        by_scene.setdefault(g.scene, []).append(j)
    used = set()
    flags = []
    for p in order:
        best = None
        for j in by_scene.get(p.scene, []):
            if j in used:
                continue
            ok, quality = criterion.score(p, gts[j])
            if ok and (best is None or quality > best[0]):
                best = (quality, j)
        if best is None:
            flags.append(False)
        else:
            used.add(best[1])
            flags.append(True)
    return flags


def average_precision(preds, gts, criterion):
    """Per-class AP and mean AP over classes that have ground truth.

    Returns ``(per_class: dict, mean_ap: float)``; classes without ground
    truth are left out of both.
    """
    classes = sorted({g.class_id for g in gts})
    per_class = {}
    for cls in classes:
        cp = [p for p in preds if p.class_id == cls]
        cg = [g for g in gts if g.class_id == cls]
        per_class[cls] = all_point_ap(match_class(cp, cg, criterion), len(cg))
    mean = math.fsum(per_class.values()) / len(per_class) if per_class else 0.0
    return per_class, mean


def pose_accuracy(preds, gts, max_degrees: float = 10.0, max_meters: float = 0.10) -> float:
    """Fraction of ground truths whose same-id prediction meets both thresholds."""
    by_id = {p.instance_id: p for p in preds}
    hits = 0
    for g in gts:
        p = by_id.get(g.instance_id)
        if p is not None:
            rot, trans = pose_error(p, g)
            hits += rot <= max_degrees and trans <= max_meters
    return hits / len(gts) if gts else 0.0


@dataclass
class EvalConfig:
    iou_thresholds: tuple = IOU_THRESHOLDS
    pose_thresholds: tuple = POSE_THRESHOLDS
    resolution: int = 50

    def criteria(self):
        out = [IoUCriterion(t, self.resolution) for t in self.iou_thresholds]
        out += [PoseCriterion(d, m) for d, m in self.pose_thresholds]
        return out


@dataclass
class EvalReport:
    columns: list
    per_class: dict
    mean: dict
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"columns": self.columns, "per_class": self.per_class, "mean": self.mean, "counts": self.counts}

    def to_csv(self) -> str:
        lines = ["class," + ",".join(self.columns)]
        for cls in sorted(self.per_class):
            lines.append(cls + "," + ",".join(f"{self.per_class[cls][c]:.4f}" for c in self.columns))
        lines.append("mean," + ",".join(f"{self.mean[c]:.4f}" for c in self.columns))
        return "\n".join(lines) + "\n"


def evaluate(preds, gts, config: EvalConfig | None = None) -> EvalReport:
    config = config or EvalConfig()
    columns, per_class, mean = [], {}, {}
    for crit in config.criteria():
        ap, m = average_precision(preds, gts, crit)
        columns.append(crit.name)
        mean[crit.name] = m
        for cls, v in ap.items():
            per_class.setdefault(cls, {})[crit.name] = v
    counts = {
        "predictions": len(preds),
        "ground_truths": len(gts),
        "per_class_gt": {c: sum(g.class_id == c for g in gts) for c in sorted({g.class_id for g in gts})},
    }
    return EvalReport(columns, per_class, mean, counts)

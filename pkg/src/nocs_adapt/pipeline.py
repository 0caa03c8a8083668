"""Glue between models, pose solving and evaluation records."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, NoConsensus
from .geom import RansacConfig
from .metrics import DetectionRecord, GroundTruthRecord
from .nocs import decode, pose_and_size


def ground_truth_records(instances) -> list[GroundTruthRecord]:
    return [GroundTruthRecord(i.instance_id, i.class_id, i.gt_pose, i.gt_size, i.symmetry) for i in instances]


def solve_instance(instance, nocs, cfg: RansacConfig | None = None) -> DetectionRecord | None:
    """Detection from a NOCS map; confidence is the RANSAC inlier fraction.

    Returns ``None`` when no pose can be solved.
    """
    try:
        pose, size, mask = pose_and_size(nocs, instance.depth, cfg)
    except (NoConsensus, DegenerateInput):
        return None
    size = np.maximum(size, 1e-9)
    return DetectionRecord(instance.instance_id, instance.class_id, pose, size, float(mask.mean()))


def predict_detections(model, instances, cfg: RansacConfig | None = None) -> list[DetectionRecord]:
    """Solve every instance from the model's fused-branch NOCS prediction."""
    out = []
    for inst in instances:
        nocs = decode(model.forward(inst.feature, ("fused",))["fused"])
        rec = solve_instance(inst, nocs, cfg)
        if rec is not None:
            out.append(rec)
    return out

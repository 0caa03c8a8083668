"""On-disk formats.

Instance file (``<id>.json``)::

    {"schema_version": 1, "instance_id": str, "class_id": str,
     "symmetry": {"kind", "axis", "order"},
     "gt_pose": {"rotation": 3x3, "translation": [3], "scale": float},
     "gt_size": [3], "gt_nocs": n x [3], "depth": n x [3],
     "feature": n x [6],
     "depth_outliers": [indices], "label_outliers": [indices],
     "label_outlier_values": k x [3]}

Manifest (``manifest.json``)::

    {"schema_version": 1, "split": str, "seed": int, "n_points": int,
     "noise": {...NoiseModel...},
     "instances": [{"id": str, "class_id": str, "file": str}, ...]}

Arrays are nested lists in row-major order. Files are written to a
temporary name and renamed into place.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geom import SimilarityPose, SymmetrySpec
from .synth import NoiseModel, SceneInstance

SCHEMA_VERSION = 1


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    write_text_atomic(path, dumps(obj) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def instance_to_dict(inst: SceneInstance) -> dict:
    label_idx = np.flatnonzero(inst.label_outlier_mask)
    return {
        "schema_version": SCHEMA_VERSION,
        "instance_id": inst.instance_id,
        "class_id": inst.class_id,
        "symmetry": inst.symmetry.to_dict(),
        "gt_pose": inst.gt_pose.to_dict(),
        "gt_size": inst.gt_size.tolist(),
        "gt_nocs": inst.gt_nocs.tolist(),
        "depth": inst.depth.tolist(),
        "feature": inst.feature.tolist(),
        "depth_outliers": np.flatnonzero(inst.depth_outlier_mask).tolist(),
        "label_outliers": label_idx.tolist(),
        "label_outlier_values": inst.label_nocs[label_idx].tolist(),
    }


def instance_from_dict(d: dict) -> SceneInstance:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported instance schema_version {version!r}")
    gt_nocs = np.asarray(d["gt_nocs"], dtype=float).reshape(-1, 3)
    n = len(gt_nocs)
    depth_out = np.zeros(n, dtype=bool)
    depth_out[np.asarray(d.get("depth_outliers", []), dtype=int)] = True
    label_out = np.zeros(n, dtype=bool)
    label_idx = np.asarray(d.get("label_outliers", []), dtype=int)
    label_out[label_idx] = True
    label_nocs = gt_nocs.copy()
    if len(label_idx):
        label_nocs[label_idx] = np.asarray(d["label_outlier_values"], dtype=float).reshape(-1, 3)
    return SceneInstance(
        instance_id=d["instance_id"],
        class_id=d["class_id"],
        gt_pose=SimilarityPose.from_dict(d["gt_pose"]),
        gt_size=np.asarray(d["gt_size"], dtype=float),
        gt_nocs=gt_nocs,
        depth=np.asarray(d["depth"], dtype=float).reshape(-1, 3),
        feature=np.asarray(d["feature"], dtype=float).reshape(n, -1),
        label_nocs=label_nocs,
        depth_outlier_mask=depth_out,
        label_outlier_mask=label_out,
        symmetry=SymmetrySpec.from_dict(d.get("symmetry", {})),
    )


def write_instance(path, inst: SceneInstance) -> None:
    write_json(path, instance_to_dict(inst))


def read_instance(path) -> SceneInstance:
    return instance_from_dict(read_json(path))


def make_manifest(split: str, instances, noise: NoiseModel, seed: int, n_points: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "split": split,
        "seed": seed,
        "n_points": n_points,
        "noise": noise.to_dict(),
        "instances": [
            {"id": inst.instance_id, "class_id": inst.class_id, "file": f"{inst.instance_id}.json"}
            for inst in instances
        ],
    }


def write_split(out_dir, manifest: dict, instances) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for inst, entry in zip(instances, manifest["instances"]):
        write_instance(out_dir / entry["file"], inst)
    write_json(out_dir / "manifest.json", manifest)


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = read_json(path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema_version {manifest.get('schema_version')!r}")
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(path) -> list[SceneInstance]:
    """All instances listed in a manifest (file or directory)."""
    manifest = read_manifest(path)
    root = Path(manifest["_root"])
    return [read_instance(root / entry["file"]) for entry in manifest["instances"]]

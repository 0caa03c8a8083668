"""Procedural category-level scenes with exact NOCS ground truth.

Objects are analytic surfaces (cylinders, hemispheres, boxes). Their NOCS
coordinates put the tight bounding box of the sampled points at the center
of the unit cube with a diagonal of exactly 1, so the similarity pose mapping
NOCS to the camera has ``scale`` equal to the object diagonal in meters.

Each point carries a 6-dim feature for the toy predictor: an "appearance"
copy and a "geometry" copy of its NOCS coordinate, each with its own noise.
The target-domain gap corrupts mainly the appearance copy.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
import math

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidSpec
from .geom import NO_SYMMETRY, Z_CONTINUOUS, SimilarityPose, SymmetrySpec, rotation_about_axis

CLASS_NAMES = ("bottle", "bowl", "camera", "can", "laptop", "mug")
FEATURE_DIM = 6


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    shape_params: dict
    symmetry: SymmetrySpec = NO_SYMMETRY


CATEGORIES = {
    "bottle": CategorySpec("bottle", "cylinder", {"radius": (0.03, 0.045), "height": (0.16, 0.26)}, Z_CONTINUOUS),
    "bowl": CategorySpec("bowl", "hemisphere", {"radius": (0.06, 0.09)}, Z_CONTINUOUS),
    "camera": CategorySpec("camera", "box", {"x": (0.09, 0.13), "y": (0.06, 0.09), "z": (0.06, 0.09)}),
    "can": CategorySpec("can", "cylinder", {"radius": (0.03, 0.04), "height": (0.10, 0.13)}, Z_CONTINUOUS),
    "laptop": CategorySpec("laptop", "box", {"x": (0.28, 0.36), "y": (0.20, 0.26), "z": (0.02, 0.035)}),
    "mug": CategorySpec(
        "mug",
        "mug",
        {"radius": (0.04, 0.05), "height": (0.08, 0.11), "handle_reach": (0.025, 0.035), "handle_width": (0.01, 0.016)},
    ),
}


@dataclass(frozen=True)
class NoiseModel:
    """Observation corruption for one domain.

    ``domain_bias`` (meters) and ``domain_warp`` (per-axis scale about the
    object center, camera frame) distort depth. ``appearance_shift`` is the
    magnitude of a per-instance random affine distortion of the appearance
    feature.
    """

    depth_sigma: float = 0.0
    outlier_fraction: float = 0.0
    label_outlier_fraction: float = 0.0
    domain_bias: tuple = (0.0, 0.0, 0.0)
    domain_warp: tuple = (1.0, 1.0, 1.0)
    appearance_sigma: float = 0.0
    geometry_sigma: float = 0.0
    appearance_shift: float = 0.0

    def __post_init__(self):
        for name in ("outlier_fraction", "label_outlier_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1), got {v}")
        if self.outlier_fraction + self.label_outlier_fraction >= 1.0:
            raise InvalidSpec("outlier fractions must sum below 1")
        for name in ("depth_sigma", "appearance_sigma", "geometry_sigma", "appearance_shift"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        object.__setattr__(self, "domain_bias", tuple(float(x) for x in self.domain_bias))
        object.__setattr__(self, "domain_warp", tuple(float(x) for x in self.domain_warp))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_bias"] = list(self.domain_bias)
        d["domain_warp"] = list(self.domain_warp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


CLEAN = NoiseModel()
SOURCE_NOISE = NoiseModel(depth_sigma=0.001, appearance_sigma=0.01, geometry_sigma=0.05)
TARGET_NOISE = NoiseModel(
    depth_sigma=0.002,
    outlier_fraction=0.05,
    domain_bias=(0.002, -0.002, 0.003),
    domain_warp=(1.005, 0.995, 1.01),
    appearance_sigma=0.08,
    geometry_sigma=0.05,
    appearance_shift=0.2,
)


@dataclass
class SceneInstance:
    instance_id: str
    class_id: str
    gt_pose: SimilarityPose
    gt_size: np.ndarray
    gt_nocs: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    label_nocs: np.ndarray
    depth_outlier_mask: np.ndarray
    label_outlier_mask: np.ndarray
    symmetry: SymmetrySpec = NO_SYMMETRY

    @property
    def corruption_mask(self) -> np.ndarray:
        return self.depth_outlier_mask | self.label_outlier_mask

    @property
    def n_points(self) -> int:
        return len(self.depth)


def _uniform(rng, lo_hi) -> float:
    lo, hi = lo_hi
    if not hi >= lo > 0:
        raise InvalidSpec(f"bad shape range {lo_hi}")
    return float(rng.uniform(lo, hi))


def _cylinder(rng, n, radius, height, z0=0.0):
    side = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, n)
    r = np.where(which == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(which == 0, rng.uniform(0, height, n), np.where(which == 1, 0.0, height))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z + z0], axis=1)


def _box(rng, n, dims, origin=(0.0, 0.0, 0.0)):
    dims = np.asarray(dims, dtype=float)
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.random((n, 3)) * dims
    side = rng.integers(0, 2, n)
    pts[np.arange(n), axis] = side * dims[axis]
    return pts - dims / 2 + np.asarray(origin)


def _hemisphere(rng, n, radius):
    # uniform on the lower half-sphere: z uniform in [-r, 0]
    z = rng.uniform(-radius, 0.0, n)
    theta = rng.uniform(0, 2 * math.pi, n)
    rho = np.sqrt(np.maximum(radius**2 - z**2, 0.0))
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)


def sample_shape(spec: CategorySpec, n: int, rng) -> np.ndarray:
    """Surface points of a random instance of ``spec`` in its object frame (m)."""
    p = spec.shape_params
    if not p:
        raise InvalidSpec(f"category {spec.name!r} has no shape parameters")
    if spec.shape == "cylinder":
        r, h = _uniform(rng, p["radius"]), _uniform(rng, p["height"])
        return _cylinder(rng, n, r, h, -h / 2)
    if spec.shape == "hemisphere":
        return _hemisphere(rng, n, _uniform(rng, p["radius"]))
    if spec.shape == "box":
        return _box(rng, n, [_uniform(rng, p[k]) for k in ("x", "y", "z")])
    if spec.shape == "mug":
        r, h = _uniform(rng, p["radius"]), _uniform(rng, p["height"])
        reach, width = _uniform(rng, p["handle_reach"]), _uniform(rng, p["handle_width"])
        handle_dims = (reach, width, 0.6 * h)
        body_area = 2 * math.pi * r * h + 2 * math.pi * r**2
        hd = np.asarray(handle_dims)
        handle_area = 2 * (hd[0] * hd[1] + hd[0] * hd[2] + hd[1] * hd[2])
        n_handle = int(rng.binomial(n, handle_area / (handle_area + body_area)))
        body = _cylinder(rng, n - n_handle, r, h, -h / 2)
        handle = _box(rng, n_handle, handle_dims, origin=(r + reach / 2, 0.0, 0.0))
        return np.concatenate([body, handle])[rng.permutation(n)]
    raise InvalidSpec(f"unknown shape {spec.shape!r}")


def normalize_to_nocs(points: np.ndarray):
    """NOCS coordinates, tight-box size (m) and diagonal (m) of object points."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = hi - lo
    diag = float(np.linalg.norm(extent))
    nocs = (points - (lo + hi) / 2) / diag + 0.5
    return np.clip(nocs, 0.0, 1.0), extent, diag


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def _swing(rot: np.ndarray, axis: int) -> np.ndarray:
    """Drop the twist of ``rot`` about object ``axis``."""
    e = np.zeros(3)
    e[axis] = 1.0
    target = rot[:, axis]
    cross = np.cross(e, target)
    s = np.linalg.norm(cross)
    if s < 1e-12:
        return np.eye(3) if target @ e > 0 else rotation_about_axis((axis + 1) % 3, math.pi)
    return rotation_about_axis(cross / s, math.atan2(s, float(e @ target)))


def _appearance_distortion(rng, magnitude: float):
    """Random non-similarity affine map of the unit cube around its center."""
    a = np.eye(3) + rng.normal(0.0, magnitude, (3, 3))
    b = rng.normal(0.0, magnitude / 2, 3)
    return a, b


def generate_instance(
    spec: CategorySpec,
    n_points: int = 1024,
    noise: NoiseModel = CLEAN,
    seed=0,
    instance_id: str = "",
    workspace=((-0.25, 0.25), (-0.15, 0.15), (0.7, 1.1)),
    canonicalize_symmetric: bool = False,
) -> SceneInstance:
    """Sample one scene instance.

    Noise is applied after the exact construction ``depth = s R nocs + t``:
    domain warp and bias, Gaussian depth noise, replacement of a fraction of
    depth points by uniform points in the (enlarged) bounding volume, and
    replacement of a disjoint fraction of labels by uniform NOCS values.
    """
    if n_points < 16:
        raise InvalidSpec("n_points must be >= 16")
    rng = np.random.default_rng(seed)
    obj = sample_shape(spec, n_points, rng)
    gt_nocs, extent, diag = normalize_to_nocs(obj)

    rot = random_rotation(rng)
    if canonicalize_symmetric and spec.symmetry.kind == "continuous":
        rot = _swing(rot, spec.symmetry.axis)
    center = np.array([rng.uniform(*w) for w in workspace])
    trans = center - diag * rot @ np.full(3, 0.5)
    pose = SimilarityPose(rot, trans, diag)
    depth = pose.apply(gt_nocs)

    if noise.domain_warp != (1.0, 1.0, 1.0) or noise.domain_bias != (0.0, 0.0, 0.0):
        depth = center + np.asarray(noise.domain_warp) * (depth - center) + np.asarray(noise.domain_bias)
    if noise.depth_sigma > 0:
        depth = depth + rng.normal(0.0, noise.depth_sigma, depth.shape)

    order = rng.permutation(n_points)
    n_depth_out = round(noise.outlier_fraction * n_points)
    n_label_out = round(noise.label_outlier_fraction * n_points)
    depth_out = np.zeros(n_points, dtype=bool)
    depth_out[order[:n_depth_out]] = True
    label_out = np.zeros(n_points, dtype=bool)
    label_out[order[n_depth_out:n_depth_out + n_label_out]] = True
    if n_depth_out:
        lo, hi = depth.min(axis=0), depth.max(axis=0)
        mid, half = (lo + hi) / 2, 0.75 * (hi - lo)
        depth[depth_out] = rng.uniform(mid - half, mid + half, (n_depth_out, 3))
    label_nocs = gt_nocs.copy()
    if n_label_out:
        label_nocs[label_out] = rng.random((n_label_out, 3))

    a, b = _appearance_distortion(rng, noise.appearance_shift) if noise.appearance_shift > 0 else (np.eye(3), np.zeros(3))
    appearance = 0.5 + (gt_nocs - 0.5) @ a.T + b
    appearance = appearance + rng.normal(0.0, noise.appearance_sigma, appearance.shape) if noise.appearance_sigma > 0 else appearance
    geometry = gt_nocs + rng.normal(0.0, noise.geometry_sigma, gt_nocs.shape) if noise.geometry_sigma > 0 else gt_nocs.copy()

    return SceneInstance(
        instance_id=instance_id,
        class_id=spec.name,
        gt_pose=pose,
        gt_size=extent,
        gt_nocs=gt_nocs,
        depth=depth,
        feature=np.concatenate([appearance, geometry], axis=1),
        label_nocs=label_nocs,
        depth_outlier_mask=depth_out,
        label_outlier_mask=label_out,
        symmetry=spec.symmetry,
    )


def class_schedule(classes, n_instances: int) -> list[str]:
    """Round-robin class assignment, so counts are balanced."""
    classes = list(classes)
    if n_instances and not classes:
        raise InvalidSpec("no classes given")
    return [classes[i % len(classes)] for i in range(n_instances)]


def generate_instances(
    classes=CLASS_NAMES,
    n_instances: int = 0,
    noise: NoiseModel = CLEAN,
    seed: int = 0,
    n_points: int = 1024,
    prefix: str = "inst",
) -> list[SceneInstance]:
    """Instances with per-instance seeds derived from ``(seed, index)``."""
    specs = [CATEGORIES[c] if isinstance(c, str) else c for c in classes]
    out = []
    for i, spec in enumerate(class_schedule(specs, n_instances)):
        out.append(generate_instance(spec, n_points, noise, seed=[seed, i], instance_id=f"{prefix}_{i:05d}"))
    return out


def generate_split(specs=CLASS_NAMES, n_instances: int = 0, noise: NoiseModel = CLEAN, seed: int = 0,
                   out_dir=None, split: str = "split", n_points: int = 1024) -> dict:
    """Generate a split and, when ``out_dir`` is given, write it to disk.

    Returns the manifest dictionary (see :mod:`nocs_adapt.dataio`).
    """
    from . import dataio

    instances = generate_instances(specs, n_instances, noise, seed, n_points, prefix=split)
    manifest = dataio.make_manifest(split, instances, noise, seed, n_points)
    if out_dir is not None:
        dataio.write_split(out_dir, manifest, instances)
    return manifest

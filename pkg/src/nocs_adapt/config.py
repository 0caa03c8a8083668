"""Experiment configuration shared by the command-line tools.

An :class:`ExperimentConfig` bundles the data generation, adaptation and
evaluation settings of one run. It round-trips through JSON, and every
command writes the effective configuration next to its outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .adapt import AdaptConfig
from .errors import InvalidSpec
from .geom import RansacConfig
from .metrics import EvalConfig
from .synth import CATEGORIES, CLASS_NAMES, SOURCE_NOISE, TARGET_NOISE, NoiseModel

CONFIG_VERSION = 1
SPLITS = ("source", "target", "target_test")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    classes: tuple = CLASS_NAMES
    n_points: int = 1024
    source_instances: int = 600
    target_instances: int = 200
    test_instances: int = 100
    source_noise: NoiseModel = SOURCE_NOISE
    target_noise: NoiseModel = TARGET_NOISE
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = [c for c in self.classes if c not in CATEGORIES]
        if unknown:
            raise InvalidSpec(f"unknown classes {unknown}; choose from {list(CLASS_NAMES)}")
        if not self.classes:
            raise InvalidSpec("at least one class is required")
        if self.n_points < 16:
            raise InvalidSpec("n_points must be at least 16")
        for name in ("source_instances", "target_instances", "test_instances"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")

    @property
    def ransac(self) -> RansacConfig:
        return self.adapt.ransac

    def split_seed(self, split: str) -> int:
        """Distinct generator seed per split, derived from the run seed."""
        return len(SPLITS) * self.seed + SPLITS.index(split)

    def split_plan(self, split: str):
        """``(instance count, noise model)`` for a split."""
        if split == "source":
            return self.source_instances, self.source_noise
        if split == "target":
            return self.target_instances, self.target_noise
        if split == "target_test":
            return self.test_instances, self.target_noise
        raise InvalidSpec(f"unknown split {split!r}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, adapt=replace(self.adapt, seed=seed))

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "classes": list(self.classes),
            "n_points": self.n_points,
            "source_instances": self.source_instances,
            "target_instances": self.target_instances,
            "test_instances": self.test_instances,
            "source_noise": self.source_noise.to_dict(),
            "target_noise": self.target_noise.to_dict(),
            "adapt": self.adapt.to_dict(),
            "eval": {
                "iou_thresholds": list(self.eval.iou_thresholds),
                "pose_thresholds": [list(t) for t in self.eval.pose_thresholds],
                "resolution": self.eval.resolution,
            },
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Build from a (possibly partial) dictionary; missing keys keep defaults.

        Raises :class:`InvalidSpec` on unknown keys or bad values.
        """
        d = dict(d)
        version = d.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise InvalidSpec(f"unsupported config_version {version!r}")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown config keys {sorted(extra)}")
        try:
            if "source_noise" in d:
                d["source_noise"] = NoiseModel.from_dict({**SOURCE_NOISE.to_dict(), **d["source_noise"]})
            if "target_noise" in d:
                d["target_noise"] = NoiseModel.from_dict({**TARGET_NOISE.to_dict(), **d["target_noise"]})
            if "adapt" in d:
                a = dict(d["adapt"])
                if "ransac" in a:
                    a["ransac"] = {**RansacConfig().__dict__, **a["ransac"]}
                d["adapt"] = AdaptConfig.from_dict(a)
            if "eval" in d:
                e = dict(d["eval"])
                if "iou_thresholds" in e:
                    e["iou_thresholds"] = tuple(float(t) for t in e["iou_thresholds"])
                if "pose_thresholds" in e:
                    e["pose_thresholds"] = tuple((float(a), float(m)) for a, m in e["pose_thresholds"])
                d["eval"] = EvalConfig(**e)
            return cls(**d)
        except InvalidSpec:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise InvalidSpec(f"invalid config: {exc}") from exc

"""Toy per-point NOCS predictor with three branches.

Each point feature is ``[appearance(3), geometry(3)]``. Branch ``A`` sees a
fixed random lifting of the appearance half, branch ``B`` a lifting of the
geometry half and ``fused`` the concatenation of both liftings. A lifting is
``[1, x - 0.5, rbf_1(x), ..., rbf_D(x)]`` where each radial feature looks at
one randomly jittered center along one input axis. Every branch is a linear
map from its lifting to ``3 x B`` logits, so gradients are exact and cheap.
"""
from __future__ import annotations

import numpy as np

from .nocs import DEFAULT_BINS

BRANCHES = ("A", "B", "fused")
CHECKPOINT_FORMAT = "nocs-adapt-checkpoint"
CHECKPOINT_VERSION = 1


class ToyPredictor:
    def __init__(self, bins: int = DEFAULT_BINS, lift_dim: int = 64, rbf_width: float | None = None, seed: int = 0):
        if bins < 2 or lift_dim < 3:
            raise ValueError("need bins >= 2 and lift_dim >= 3")
        self.bins = bins
        self.lift_dim = lift_dim
        self.seed = seed
        rng = np.random.default_rng([seed, 7])
        per_axis = int(np.ceil(lift_dim / 3))
        spacing = 1.3 / per_axis
        self.rbf_width = float(rbf_width if rbf_width is not None else 0.6 * spacing)
        self.centers = {}
        self.axes = {}
        for mod in ("A", "B"):
            axes = np.arange(lift_dim) % 3
            slot = np.arange(lift_dim) // 3
            self.axes[mod] = axes
            self.centers[mod] = -0.15 + (slot + rng.random(lift_dim)) * spacing
        width = 4 + lift_dim
        out = 3 * bins
        self.weights = {
            "A": np.zeros((width, out)),
            "B": np.zeros((width, out)),
            "fused": np.zeros((2 * width, out)),
        }

    # -- forward/backward -------------------------------------------------
    def _lift_one(self, x: np.ndarray, mod: str) -> np.ndarray:
        r = (x[:, self.axes[mod]] - self.centers[mod]) / self.rbf_width
        return np.concatenate([np.ones((len(x), 1)), x - 0.5, np.exp(-0.5 * r * r)], axis=1)

    def lift(self, feature) -> dict:
        f = np.asarray(feature, dtype=float)
        if f.ndim != 2 or f.shape[1] != 6:
            raise ValueError(f"feature must have shape (n, 6), got {f.shape}")
        a = self._lift_one(f[:, :3], "A")
        b = self._lift_one(f[:, 3:], "B")
        return {"A": a, "B": b, "fused": np.concatenate([a, b], axis=1)}

    def logits_from_lift(self, lifts: dict, branches=BRANCHES) -> dict:
        n = len(lifts["A"])
        return {k: (lifts[k] @ self.weights[k]).reshape(n, 3, self.bins) for k in branches}

    def forward(self, feature, branches=BRANCHES) -> dict:
        return self.logits_from_lift(self.lift(feature), branches)

    def weight_grads(self, lifts: dict, dlogits: dict) -> dict:
        """Backpropagate logit gradients to the branch weights."""
        return {k: lifts[k].T @ g.reshape(len(g), -1) for k, g in dlogits.items()}

    def apply_update(self, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            self.weights[k] -= lr * g

    # -- state --------------------------------------------------------------
    def copy(self) -> "ToyPredictor":
        other = ToyPredictor.__new__(ToyPredictor)
        other.__dict__.update(self.__dict__)
        other.weights = {k: v.copy() for k, v in self.weights.items()}
        return other

    def momentum_update(self, student: "ToyPredictor", gamma: float) -> None:
        """In-place ``self <- gamma * self + (1 - gamma) * student``."""
        if gamma == 1.0:
            return
        for k in self.weights:
            self.weights[k] = gamma * self.weights[k] + (1.0 - gamma) * student.weights[k]

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in BRANCHES])

    def set_flat_weights(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for k in BRANCHES:
            w = self.weights[k]
            self.weights[k] = flat[i:i + w.size].reshape(w.shape).copy()
            i += w.size

    def to_dict(self) -> dict:
        """Checkpoint: hyperparameters plus tensors as ``{shape, data}``."""
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "bins": self.bins,
            "lift_dim": self.lift_dim,
            "rbf_width": self.rbf_width,
            "seed": self.seed,
            "tensors": {
                k: {"shape": list(w.shape), "data": w.ravel().tolist()} for k, w in self.weights.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPredictor":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a toy predictor checkpoint")
        model = cls(d["bins"], d["lift_dim"], d["rbf_width"], d["seed"])
        for k, t in d["tensors"].items():
            w = np.asarray(t["data"], dtype=float).reshape(t["shape"])
            if w.shape != model.weights[k].shape:
                raise ValueError(f"tensor {k} has shape {w.shape}, expected {model.weights[k].shape}")
            model.weights[k] = w
        return model

    def __eq__(self, other) -> bool:
        if not isinstance(other, ToyPredictor):
            return NotImplemented
        return (
            self.bins == other.bins
            and self.lift_dim == other.lift_dim
            and self.seed == other.seed
            and all(np.array_equal(self.weights[k], other.weights[k]) for k in BRANCHES)
        )

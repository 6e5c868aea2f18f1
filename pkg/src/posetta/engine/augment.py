"""Geometric and occlusion augmentations acting on features, keypoints and poses.

A transform is an image-plane similarity about the principal point,
``u' = c + s R(a) (u - c) + t``, optionally followed by hiding keypoints
(occlusion, or truncation by a crop). In 3D the rotation is a camera roll
about the optical axis; scale and translation leave root-relative poses
unchanged. Every field carries a leading batch dimension so one object
describes the transforms of a whole minibatch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kinematics import InvalidInputError
from ..streamgen import FEATURE_HALF_SPAN


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "weak"  # "weak" or "strong"
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_shift_px: float = 8.0
    truncation_prob: float = 0.3
    truncated_range: tuple[int, int] = (2, 4)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise InvalidInputError(f"unknown augmentation kind {self.kind!r}")
        if min(self.scale_range) <= 0:
            raise InvalidInputError("scale must be positive")


@dataclass
class Transform:
    angle: np.ndarray      # (B,) radians
    scale: np.ndarray      # (B,)
    shift: np.ndarray      # (B, 2) pixels
    principal: np.ndarray  # (B, 2) pixels
    hidden: np.ndarray     # (B, J) bool: occluded or truncated in the augmented view

    def __post_init__(self):
        if np.any(self.scale == 0):
            raise InvalidInputError("a zero scale is not invertible")

    @property
    def batch(self) -> int:
        return self.angle.shape[0]

    @classmethod
    def identity(cls, batch: int, joint_count: int, principal=(128.0, 128.0)) -> "Transform":
        return cls(np.zeros(batch), np.ones(batch), np.zeros((batch, 2)),
                   np.broadcast_to(np.asarray(principal, float), (batch, 2)).copy(),
                   np.zeros((batch, joint_count), dtype=bool))

    def _rot2(self, sign=1.0):
        c, s = np.cos(self.angle), np.sin(sign * self.angle)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (B, 2, 2)

    def rot3_inverse(self) -> np.ndarray:
        R = np.zeros((self.batch, 3, 3))
        R[:, :2, :2] = self._rot2(-1.0)
        R[:, 2, 2] = 1.0
        return R

    # 2D keypoints ---------------------------------------------------------
    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        c = self.principal[:, None, :]
        rel = np.einsum("bij,bkj->bki", self._rot2(), pts - c)
        return c + self.scale[:, None, None] * rel + self.shift[:, None, :]

    def invert_points(self, pts: np.ndarray) -> np.ndarray:
        c = self.principal[:, None, :]
        rel = (pts - c - self.shift[:, None, :]) / self.scale[:, None, None]
        return c + np.einsum("bij,bkj->bki", self._rot2(-1.0), rel)

    def invert_points_vjp(self, g: np.ndarray) -> np.ndarray:
        # transpose of the linear part of invert_points
        return np.einsum("bji,bkj->bki", self._rot2(-1.0), g) / self.scale[:, None, None]

    # features -------------------------------------------------------------
    def apply_features(self, feats: np.ndarray) -> np.ndarray:
        """Transform the coordinate block of features and zero hidden keypoints."""
        B, D = feats.shape
        J = D // 3
        coords = feats[:, :2 * J].reshape(B, J, 2)
        vis = feats[:, 2 * J:] * ~self.hidden
        rel = np.einsum("bij,bkj->bki", self._rot2(), coords)
        new = self.scale[:, None, None] * rel + (self.shift / FEATURE_HALF_SPAN)[:, None, :]
        new *= vis[..., None]
        return np.concatenate([new.reshape(B, 2 * J), vis], axis=1)

    # 3D poses -------------------------------------------------------------
    def invert_pose(self, joints: np.ndarray) -> np.ndarray:
        """Root-relative pose in the original camera frame."""
        rel = joints - joints[:, :1, :]
        return np.einsum("bij,bkj->bki", self.rot3_inverse(), rel)


def sample_transform(spec: AugmentSpec, rng, principal: np.ndarray, joint_count: int,
                     occlude: np.ndarray | None = None, feats: np.ndarray | None = None) -> Transform:
    """Random transform(s) from ``spec``; ``principal`` is ``(B, 2)``.

    For strong augmentation ``occlude`` (``(B, J)`` bool) lists keypoints to
    hide, and ``feats`` (the un-augmented features) locate keypoints so a
    random crop can truncate the ones that fall outside it.
    """
    B = principal.shape[0]
    angle = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg, B))
    scale = rng.uniform(*spec.scale_range, B)
    shift = rng.uniform(-spec.max_shift_px, spec.max_shift_px, (B, 2))
    hidden = np.zeros((B, joint_count), dtype=bool)
    t = Transform(angle, scale, shift, np.asarray(principal, float).copy(), hidden)
    if spec.kind == "strong":
        if occlude is not None:
            hidden |= np.asarray(occlude, dtype=bool)
        if feats is not None:
            hidden |= truncation_mask(t, feats, spec, rng)
    return t


def truncation_mask(t: Transform, feats: np.ndarray, spec: AugmentSpec, rng) -> np.ndarray:
    """Keypoints pushed out of a random right/bottom crop of the augmented view."""
    B, D = feats.shape
    J = D // 3
    coords = feats[:, :2 * J].reshape(B, J, 2)
    vis = feats[:, 2 * J:] > 0
    moved = t.scale[:, None, None] * np.einsum("bij,bkj->bki", t._rot2(), coords) \
        + (t.shift / FEATURE_HALF_SPAN)[:, None, :]
    out = np.zeros((B, J), dtype=bool)
    for b in range(B):
        if rng.random() >= spec.truncation_prob or vis[b].sum() < 4:
            continue
        axis = int(rng.integers(2))
        k = int(rng.integers(spec.truncated_range[0], spec.truncated_range[1] + 1))
        vals = np.where(vis[b], moved[b, :, axis], -np.inf)
        order = np.sort(vals[vis[b]])
        k = min(k, len(order) - 1)
        cut = 0.5 * (order[-k] + order[-k - 1])
        out[b] = vis[b] & (moved[b, :, axis] > cut)
    return out

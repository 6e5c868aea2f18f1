"""Articulated skeleton, pinhole camera and pose error metrics.

Every array function accepts optional leading batch dimensions. Poses are
``(..., J, 3)`` arrays in metres in camera coordinates (x right, y down,
z forward); 2D keypoints are ``(..., J, 2)`` arrays in pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA_DIM = 10
BETA_MIN, BETA_MAX = 0.5, 2.0

JOINT_NAMES = (
    "pelvis", "thorax", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)


class InvalidInputError(ValueError):
    pass


class ProjectionError(ValueError):
    """Raised when a joint lies at or behind the camera plane."""


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTemplate:
    parent: tuple[int, ...]
    rest_offset: np.ndarray
    # which beta coefficient scales the bone ending at each joint (-1 for root)
    beta_index: tuple[int, ...]

    def __post_init__(self):
        J = len(self.parent)
        if J < 12:
            raise InvalidInputError(f"skeleton needs at least 12 joints, got {J}")
        if self.parent[0] != -1:
            raise InvalidInputError("joint 0 must be the root")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise InvalidInputError(f"joint {j} has invalid parent {self.parent[j]}")
        off = np.asarray(self.rest_offset, dtype=float)
        if off.shape != (J, 3) or np.any(off[0] != 0.0):
            raise InvalidInputError("rest_offset must be (J, 3) with a zero root row")
        if len(self.beta_index) != J:
            raise InvalidInputError("beta_index must have one entry per joint")
        object.__setattr__(self, "rest_offset", off)
        object.__setattr__(self, "_levels", _depth_levels(self.parent))

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def levels(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(joints, parents) grouped by depth, root level excluded."""
        return self._levels

    def children(self, j: int) -> list[int]:
        return [k for k, p in enumerate(self.parent) if p == j]


def _depth_levels(parent):
    depth = [0] * len(parent)
    for j in range(1, len(parent)):
        depth[j] = depth[parent[j]] + 1
    levels = []
    for d in range(1, max(depth) + 1):
        idx = np.array([j for j in range(len(parent)) if depth[j] == d])
        levels.append((idx, np.array([parent[j] for j in idx])))
    return levels


def default_skeleton() -> SkeletonTemplate:
    """15-joint body, arms hanging at rest, roughly 1.6 m tall."""
    parent = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13)
    rest = np.array([
        [0.0, 0.0, 0.0],
        [0.0, -0.50, 0.0],
        [0.0, -0.25, 0.0],
        [0.18, 0.02, 0.0],
        [0.02, 0.28, 0.0],
        [0.0, 0.25, 0.0],
        [-0.18, 0.02, 0.0],
        [-0.02, 0.28, 0.0],
        [0.0, 0.25, 0.0],
        [0.10, 0.05, 0.0],
        [0.0, 0.42, 0.0],
        [0.0, 0.40, 0.0],
        [-0.10, 0.05, 0.0],
        [0.0, 0.42, 0.0],
        [0.0, 0.40, 0.0],
    ])
    # spine, neck, clavicles, upper arms L/R, forearms L/R, hips, legs L/R
    beta_index = (-1, 0, 1, 2, 3, 5, 2, 4, 6, 7, 8, 8, 7, 9, 9)
    return SkeletonTemplate(parent, rest, beta_index)


@dataclass
class PoseParams:
    """Joint rotations (axis-angle), bone scales and root translation.

    Arrays may carry a shared leading batch shape: ``theta (..., J, 3)``,
    ``beta (..., 10)``, ``trans (..., 3)``.
    """

    theta: np.ndarray
    beta: np.ndarray
    trans: np.ndarray

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.theta.shape[:-2]

    def vector(self) -> np.ndarray:
        b = self.batch_shape
        return np.concatenate([self.theta.reshape(b + (-1,)), self.beta, self.trans], axis=-1)

    @classmethod
    def from_vector(cls, vec: np.ndarray, joint_count: int) -> "PoseParams":
        vec = np.asarray(vec, dtype=float)
        n = 3 * joint_count
        if vec.shape[-1] != n + BETA_DIM + 3:
            raise InvalidInputError(f"expected {n + BETA_DIM + 3} values, got {vec.shape[-1]}")
        b = vec.shape[:-1]
        return cls(vec[..., :n].reshape(b + (joint_count, 3)), vec[..., n:n + BETA_DIM], vec[..., n + BETA_DIM:])

    @classmethod
    def rest(cls, joint_count: int, trans=(0.0, 0.0, 5.0)) -> "PoseParams":
        return cls(np.zeros((joint_count, 3)), np.ones(BETA_DIM), np.asarray(trans, dtype=float))

    def copy(self) -> "PoseParams":
        return PoseParams(self.theta.copy(), self.beta.copy(), self.trans.copy())

    def __getitem__(self, i) -> "PoseParams":
        return PoseParams(self.theta[i], self.beta[i], self.trans[i])


@dataclass(frozen=True)
class Camera:
    focal: float = 500.0
    principal: tuple[float, float] = (128.0, 128.0)
    image_size: tuple[float, float] = (256.0, 256.0)

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidInputError("focal must be positive")
        (cx, cy), (w, h) = self.principal, self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise InvalidInputError("principal point outside image")

    def in_bounds(self, points: np.ndarray) -> np.ndarray:
        w, h = self.image_size
        return (points[..., 0] >= 0) & (points[..., 0] <= w) & (points[..., 1] >= 0) & (points[..., 1] <= h)


def default_camera() -> Camera:
    return Camera()


@dataclass
class Keypoints2D:
    points: np.ndarray
    confidence: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.confidence is None:
            self.confidence = np.ones(self.points.shape[:-1])
        self.confidence = np.asarray(self.confidence, dtype=float)
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise InvalidInputError("confidence must lie in [0, 1]")


# ---------------------------------------------------------------------------
# rotations

def skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee_antisym(m: np.ndarray) -> np.ndarray:
    # <M, skew(e_k)> for k = 0, 1, 2
    return np.stack([
        m[..., 2, 1] - m[..., 1, 2],
        m[..., 0, 2] - m[..., 2, 0],
        m[..., 1, 0] - m[..., 0, 1],
    ], axis=-1)


_SMALL = 2.5e-3  # squared angle below which Taylor series are used


def _rodrigues_coeffs(s: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives w.r.t. s = t^2."""
    small = s < _SMALL
    t = np.sqrt(np.where(small, 1.0, s))
    sin, cos = np.sin(t), np.cos(t)
    a = np.where(small, 1 - s / 6 + s * s / 120, sin / t)
    b = np.where(small, 0.5 - s / 24 + s * s / 720, (1 - cos) / np.where(small, 1.0, s))
    da = np.where(small, -1 / 6 + s / 60 - s * s / 1680, (t * cos - sin) / (2 * t ** 3))
    db = np.where(small, -1 / 24 + s / 360 - s * s / 13440, (t * sin - 2 * (1 - cos)) / (2 * t ** 4))
    return a, b, da, db


def axis_angle_to_matrix(omega: np.ndarray) -> np.ndarray:
    R, _ = _rodrigues(omega)
    return R


def _rodrigues(omega):
    K = skew(omega)
    K2 = K @ K
    s = np.sum(omega * omega, axis=-1)
    a, b, da, db = _rodrigues_coeffs(s)
    R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2
    return R, (omega, K, K2, a, b, da, db)


def _rodrigues_vjp(cache, dR):
    omega, K, K2, a, b, da, db = cache
    gK = np.sum(dR * K, axis=(-2, -1))
    gK2 = np.sum(dR * K2, axis=(-2, -1))
    Kt = np.swapaxes(K, -1, -2)
    N = dR @ Kt + Kt @ dR
    return (2 * omega * (da * gK + db * gK2)[..., None]
            + a[..., None] * _vee_antisym(dR)
            + b[..., None] * _vee_antisym(N))


# ---------------------------------------------------------------------------
# forward kinematics

def bone_scales(skel: SkeletonTemplate, beta: np.ndarray) -> np.ndarray:
    idx = np.asarray(skel.beta_index)
    scales = beta[..., np.maximum(idx, 0)]
    scales[..., idx < 0] = 1.0
    return scales


def _check_params(skel, params):
    J = skel.joint_count
    if params.theta.shape[-2:] != (J, 3):
        raise InvalidInputError(f"theta must be (..., {J}, 3), got {params.theta.shape}")
    if params.beta.shape[-1] != BETA_DIM or params.trans.shape[-1] != 3:
        raise InvalidInputError("beta must have 10 entries and trans 3")


def fk_forward(skel: SkeletonTemplate, params: PoseParams):
    """Forward kinematics returning joints and a cache for :func:`fk_backward`."""
    _check_params(skel, params)
    theta = np.asarray(params.theta, dtype=float)
    batch = theta.shape[:-2]
    J = skel.joint_count
    R, rcache = _rodrigues(theta)
    scales = bone_scales(skel, params.beta)
    G = np.empty(batch + (J, 3, 3))
    P = np.empty(batch + (J, 3))
    G[..., 0, :, :] = R[..., 0, :, :]
    P[..., 0, :] = params.trans
    offs = scales[..., None] * skel.rest_offset
    for idx, par in skel.levels:
        Gp = G[..., par, :, :]
        P[..., idx, :] = P[..., par, :] + np.einsum("...nij,...nj->...ni", Gp, offs[..., idx, :])
        G[..., idx, :, :] = Gp @ R[..., idx, :, :]
    return P, (R, rcache, G, offs)


def fk_backward(skel: SkeletonTemplate, cache, dP: np.ndarray) -> PoseParams:
    """Vector-Jacobian product of :func:`fk_forward` w.r.t. theta, beta and trans."""
    R, rcache, G, offs = cache
    dP = np.array(dP, dtype=float)
    dG = np.zeros_like(G)
    doff = np.zeros_like(offs)
    dR = np.zeros_like(R)
    for idx, par in reversed(skel.levels):
        Gp = G[..., par, :, :]
        dGi = dG[..., idx, :, :]
        dR[..., idx, :, :] = np.swapaxes(Gp, -1, -2) @ dGi
        dPi = dP[..., idx, :]
        gp = dGi @ np.swapaxes(R[..., idx, :, :], -1, -2) + dPi[..., :, None] * offs[..., idx, None, :]
        doff[..., idx, :] = np.einsum("...nji,...nj->...ni", Gp, dPi)
        # several children can share a parent
        for k, p in enumerate(par):
            dP[..., p, :] += dPi[..., k, :]
            dG[..., p, :, :] += gp[..., k, :, :]
    dR[..., 0, :, :] = dG[..., 0, :, :]
    dtheta = _rodrigues_vjp(rcache, dR)
    dscale = np.sum(doff * skel.rest_offset, axis=-1)
    dbeta = np.zeros(dscale.shape[:-1] + (BETA_DIM,))
    for j, bi in enumerate(skel.beta_index):
        if bi >= 0:
            dbeta[..., bi] += dscale[..., j]
    return PoseParams(dtheta, dbeta, dP[..., 0, :].copy())


def forward_kinematics(skel: SkeletonTemplate, params: PoseParams) -> np.ndarray:
    return fk_forward(skel, params)[0]


# ---------------------------------------------------------------------------
# projection

def project_points(joints: np.ndarray, cam: Camera) -> np.ndarray:
    z = joints[..., 2]
    if np.any(z <= 1e-3):
        raise ProjectionError("joint depth must exceed 1e-3 m")
    return cam.focal * joints[..., :2] / z[..., None] + np.asarray(cam.principal)


def project_vjp(joints: np.ndarray, cam: Camera, d2: np.ndarray) -> np.ndarray:
    z = joints[..., 2:3]
    d3 = np.empty(joints.shape)
    d3[..., :2] = cam.focal * d2 / z
    d3[..., 2] = -cam.focal * np.sum(d2 * joints[..., :2], axis=-1) / joints[..., 2] ** 2
    return d3


def project(pose: np.ndarray, cam: Camera) -> Keypoints2D:
    return Keypoints2D(project_points(pose, cam))


# ---------------------------------------------------------------------------
# metrics

def _same_shape(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float | np.ndarray:
    """Root-relative mean per-joint position error in millimetres."""
    pred, gt = _same_shape(pred, gt)
    p = pred - pred[..., :1, :]
    g = gt - gt[..., :1, :]
    return 1000.0 * np.linalg.norm(p - g, axis=-1).mean(axis=-1)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform of ``pred`` that best matches ``gt`` (single pose)."""
    pred, gt = _same_shape(pred, gt)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    X, Y = pred - mu_p, gt - mu_g
    var_x = np.sum(X ** 2)
    if np.sum(Y ** 2) < 1e-18 or var_x < 1e-18:
        raise AlignmentError("cannot align degenerate point sets")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    Rm = U @ D @ Vt
    scale = np.sum(S * np.diag(D)) / var_x
    return scale * X @ Rm + mu_g


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _same_shape(pred, gt)
    if pred.ndim > 2:
        return np.array([pa_mpjpe(p, g) for p, g in zip(pred, gt)])
    aligned = procrustes_align(pred, gt)
    return 1000.0 * float(np.linalg.norm(aligned - gt, axis=-1).mean())


def epe_2d(pred, ref) -> float:
    """Mean keypoint pixel distance. Accepts Keypoints2D or raw arrays."""
    p = pred.points if isinstance(pred, Keypoints2D) else pred
    r = ref.points if isinstance(ref, Keypoints2D) else ref
    p, r = _same_shape(p, r)
    return np.linalg.norm(p - r, axis=-1).mean(axis=-1)

"""Adaptation losses with hand-written reverse passes.

Every loss takes a (batched) PoseParams prediction and returns
``(value, d value / d params)`` so it can be handed to
:func:`posetta.diffmodel.loss_gradient`. Values are averaged over the batch.

2D residuals are in pixels. 3D consistency residuals are root-relative and
measured in centimetres, which puts the default 3D weight of 10 on the same
footing as the 2D term (the equivalent of normalized image coordinates
against metres).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kinematics import PoseParams, ProjectionError, SkeletonTemplate, fk_backward, fk_forward
from .augment import Transform

THETA_MAX = np.pi / 2
CM_PER_M = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-4
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class FrameBatch:
    """Observations for a minibatch of frames (leading dimension B)."""

    features: np.ndarray     # (B, D)
    est_2d: np.ndarray       # (B, J, 2)
    conf: np.ndarray         # (B, J)
    focal: np.ndarray        # (B,)
    principal: np.ndarray    # (B, 2)
    pred_3d: np.ndarray | None = None   # (B, J, 3) stored 3D predictions
    confident: np.ndarray | None = None  # (B,) bool

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @classmethod
    def single(cls, features, est_2d, conf, camera, pred_3d=None, confident=None) -> "FrameBatch":
        return cls(
            np.asarray(features, float)[None], np.asarray(est_2d, float)[None], np.asarray(conf, float)[None],
            np.array([camera.focal], float), np.asarray(camera.principal, float)[None],
            None if pred_3d is None else np.asarray(pred_3d, float)[None],
            None if confident is None else np.array([bool(confident)]),
        )

    @classmethod
    def from_records(cls, records) -> "FrameBatch":
        return cls(
            np.stack([r.features for r in records]),
            np.stack([r.est_2d for r in records]),
            np.stack([r.confidence for r in records]),
            np.array([r.camera.focal for r in records], float),
            np.array([r.camera.principal for r in records], float),
            np.stack([r.pred_3d for r in records]),
            np.array([r.confident for r in records]),
        )


def keypoint_weights(conf: np.ndarray, tau: float) -> np.ndarray:
    """Per-sample weights summing to one over keypoints with confidence above ``tau``.

    Samples with no such keypoint fall back to confidence-proportional weights.
    """
    mask = (conf > tau).astype(float)
    n = mask.sum(axis=-1, keepdims=True)
    csum = conf.sum(axis=-1, keepdims=True)
    fallback = np.divide(conf, csum, out=np.zeros_like(conf), where=csum > 0)
    return np.where(n > 0, mask / np.maximum(n, 1.0), fallback)


def _normalize_rows(w):
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def prior_penalty(params: PoseParams) -> tuple[float, PoseParams]:
    """Soft joint-limit hinge on theta plus a pull of beta towards one."""
    theta, beta = params.theta, params.beta
    B = int(np.prod(params.batch_shape)) or 1
    excess = np.maximum(np.abs(theta) - THETA_MAX, 0.0)
    value = (np.sum(excess ** 2) + np.sum((beta - 1.0) ** 2)) / B
    grad = PoseParams(2.0 * excess * np.sign(theta) / B, 2.0 * (beta - 1.0) / B, np.zeros_like(params.trans))
    return float(value), grad


def _add(a: PoseParams, b: PoseParams, scale=1.0) -> PoseParams:
    return PoseParams(a.theta + scale * b.theta, a.beta + scale * b.beta, a.trans + scale * b.trans)


def consistency_loss(params: PoseParams, batch: FrameBatch, skel: SkeletonTemplate, *,
                     weights2d: np.ndarray, weights3d: np.ndarray | None = None,
                     lambda2: float = 0.0, lambda1: float = 0.0,
                     transform: Transform | None = None) -> tuple[float, PoseParams]:
    """Shared body of all projection / consistency losses.

    ``weights2d`` (B, J) weight squared pixel residuals between the
    (inverse-transformed) projection and ``batch.est_2d``. ``weights3d``
    (B, J) weight squared centimetre residuals between the inverse-transformed
    root-relative prediction and ``batch.pred_3d``; rows of zeros switch the
    3D term off for that sample.
    """
    B = batch.size
    P, cache = fk_forward(skel, params)
    z = P[..., 2]
    if np.any(z <= 1e-3):
        raise ProjectionError("predicted joint at or behind the camera")
    f = batch.focal[:, None, None]
    u = f * P[..., :2] / z[..., None] + batch.principal[:, None, :]
    u_cmp = transform.invert_points(u) if transform is not None else u
    r = u_cmp - batch.est_2d
    value = np.sum(weights2d[..., None] * r * r)
    du = 2.0 * weights2d[..., None] * r
    if transform is not None:
        du = transform.invert_points_vjp(du)
    dP = np.empty_like(P)
    dP[..., :2] = f * du / z[..., None]
    dP[..., 2] = -batch.focal[:, None] * np.sum(du * P[..., :2], axis=-1) / (z * z)

    if weights3d is not None and lambda2 > 0 and np.any(weights3d):
        rel = P - P[:, :1, :]
        if transform is not None:
            Rinv = transform.rot3_inverse()
            q = np.einsum("bij,bkj->bki", Rinv, rel)
        else:
            q = rel
        target = batch.pred_3d - batch.pred_3d[:, :1, :]
        r3 = CM_PER_M * (q - target)
        value += lambda2 * np.sum(weights3d[..., None] * r3 * r3)
        dq = 2.0 * lambda2 * CM_PER_M * weights3d[..., None] * r3
        drel = np.einsum("bji,bkj->bki", Rinv, dq) if transform is not None else dq
        dP += drel
        dP[:, 0, :] -= drel.sum(axis=1)

    value /= B
    dP /= B
    grad = fk_backward(skel, cache, dP)
    if lambda1 > 0:
        pv, pg = prior_penalty(params)
        value += lambda1 * pv
        grad = _add(grad, pg, lambda1)
    return float(value), grad


# ---------------------------------------------------------------------------
# the five losses

def loss_2d(params, batch: FrameBatch, skel, tau=0.8):
    return consistency_loss(params, batch, skel, weights2d=keypoint_weights(batch.conf, tau))


def loss_proj(params, batch: FrameBatch, skel, weights: LossWeights = LossWeights(), tau=0.8):
    return consistency_loss(params, batch, skel, weights2d=keypoint_weights(batch.conf, tau),
                            lambda1=weights.lambda1)


def loss_aug(params, batch: FrameBatch, skel, transform: Transform, weights: LossWeights = LossWeights(),
             tau=0.8, supervise_hidden=False):
    """Consistency of predictions on a strongly augmented view with the stored
    originals of a confident frame.

    With ``supervise_hidden`` the occluded / truncated keypoints keep their
    targets (the stored originals are known for them); otherwise they are
    dropped from both terms.
    """
    J = batch.conf.shape[1]
    w2 = (batch.conf > tau).astype(float)
    w3 = np.ones((batch.size, J))
    if not supervise_hidden:
        w2 = w2 * ~transform.hidden
        w3 = w3 * ~transform.hidden
    return consistency_loss(params, batch, skel, weights2d=_normalize_rows(w2), weights3d=_normalize_rows(w3),
                            lambda2=weights.lambda2, transform=transform)


def loss_adapt(params, batch: FrameBatch, skel, transform: Transform | None = None,
               weights: LossWeights = LossWeights(), tau=0.8, pseudo_label: str = "adaptive"):
    """2D term for every record, 3D pseudo-label term according to ``pseudo_label``:
    ``"adaptive"`` (confident records only), ``"strong"`` (all) or ``"weak"`` (none)."""
    J = batch.conf.shape[1]
    if pseudo_label == "adaptive":
        use3d = np.asarray(batch.confident, dtype=float)
    elif pseudo_label == "strong":
        use3d = np.ones(batch.size)
    elif pseudo_label == "weak":
        use3d = np.zeros(batch.size)
    else:
        raise ValueError(f"unknown pseudo-label mode {pseudo_label!r}")
    w3 = np.repeat(use3d[:, None] / J, J, axis=1)
    return consistency_loss(params, batch, skel, weights2d=keypoint_weights(batch.conf, tau),
                            weights3d=w3, lambda2=weights.lambda2, lambda1=weights.lambda1,
                            transform=transform)


def confident_epe(points: np.ndarray, est_2d: np.ndarray, conf: np.ndarray, tau=0.8) -> float:
    """Mean pixel distance over confident keypoints (all keypoints if none are)."""
    d = np.linalg.norm(points - est_2d, axis=-1)
    m = conf > tau
    return float(d[m].mean()) if m.any() else float(d.mean())

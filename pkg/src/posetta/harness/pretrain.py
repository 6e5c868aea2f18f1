"""Supervised pretraining of the regressor on the labelled source domain."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .. import diffmodel as dm
from ..kinematics import PoseParams, SkeletonTemplate, default_skeleton, fk_backward, fk_forward, mpjpe
from ..streamgen import StreamConfig, feature_dim, generate_source

log = logging.getLogger(__name__)

DM_PER_M = 10.0


@dataclass(frozen=True)
class PretrainConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps_per_eval: int = 500
    max_evals: int = 80
    patience: int = 5
    validation_fraction: float = 0.1
    joint_weight: float = 1.0
    seed: int = 22


class DivergenceError(RuntimeError):
    pass


def supervised_loss(params: PoseParams, target: PoseParams, skel: SkeletonTemplate, joint_weight: float = 1.0):
    """Squared parameter error plus squared root-relative joint error (decimetres), batch mean."""
    B = params.theta.shape[0]
    dth, dbe, dtr = params.theta - target.theta, params.beta - target.beta, params.trans - target.trans
    value = np.sum(dth ** 2) + np.sum(dbe ** 2) + np.sum(dtr ** 2)
    grad = PoseParams(2 * dth, 2 * dbe, 2 * dtr)
    if joint_weight > 0:
        P, cache = fk_forward(skel, params)
        Q, _ = fk_forward(skel, target)
        r = DM_PER_M * ((P - P[:, :1]) - (Q - Q[:, :1]))
        value += joint_weight * np.sum(r ** 2)
        drel = 2 * joint_weight * DM_PER_M * r
        dP = drel.copy()
        dP[:, 0] -= drel.sum(axis=1)
        g = fk_backward(skel, cache, dP)
        grad = PoseParams(grad.theta + g.theta, grad.beta + g.beta, grad.trans + g.trans)
    grad = PoseParams(grad.theta / B, grad.beta / B, grad.trans / B)
    return float(value / B), grad


def validation_mpjpe(state: dm.RegressorState, feats, params: PoseParams, skel) -> float:
    pred, _ = fk_forward(skel, dm.predict(state, feats))
    gt, _ = fk_forward(skel, params)
    return float(np.mean(mpjpe(pred, gt)))


def pretrain(stream_cfg: StreamConfig = StreamConfig(), cfg: PretrainConfig = PretrainConfig(),
             skel: SkeletonTemplate | None = None):
    """Train from scratch until validation MPJPE stops improving for ``patience``
    evaluations. Returns the best state and the evaluation log as
    ``[(step, train_loss, val_mpjpe_mm), ...]``; the first entry is the
    untrained model."""
    skel = skel or default_skeleton()
    J = skel.joint_count
    feats, params = generate_source(stream_cfg, skel)
    n = len(feats)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val_f, val_p = feats[-n_val:], params[n - n_val:]
    tr_f, tr_p = feats[:-n_val], params[:n - n_val]
    state = dm.RegressorState.initialize(feature_dim(J), cfg.hidden_dims, J, seed=cfg.seed)
    adam = dm.AdamState.like(state, cfg.learning_rate, 0.9)
    rng = np.random.default_rng([cfg.seed, 11])

    best = state.copy()
    best_err = validation_mpjpe(state, val_f, val_p, skel)
    history = [(0, float("nan"), best_err)]
    bad, step = 0, 0
    order, pos = rng.permutation(len(tr_f)), 0
    for _ in range(cfg.max_evals):
        running = 0.0
        for _ in range(cfg.steps_per_eval):
            if pos + cfg.batch_size > len(order):
                order, pos = rng.permutation(len(tr_f)), 0
            idx = order[pos:pos + cfg.batch_size]
            pos += cfg.batch_size
            target = tr_p[idx]
            try:
                value, grad = dm.loss_gradient(state, tr_f[idx],
                                               lambda p: supervised_loss(p, target, skel, cfg.joint_weight))
            except dm.GradientError as exc:
                raise DivergenceError(f"pretraining diverged at step {step}: {exc}") from exc
            dm.adam_step(state, adam, grad)
            running += value
            step += 1
        err = validation_mpjpe(state, val_f, val_p, skel)
        history.append((step, running / cfg.steps_per_eval, err))
        log.info("step %d loss %.4f val mpjpe %.2f mm", step, running / cfg.steps_per_eval, err)
        if err < best_err - 1e-9:
            best, best_err, bad = state.copy(), err, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best, history

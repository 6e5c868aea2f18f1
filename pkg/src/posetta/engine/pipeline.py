"""Streaming adaptation: two-stage optimization, local augmentation,
adaptive aggregation and the single-stream / per-video / full pipelines."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import diffmodel as dm
from ..kinematics import (
    ProjectionError,
    SkeletonTemplate,
    default_skeleton,
    epe_2d,
    forward_kinematics,
    mpjpe,
    pa_mpjpe,
    project_points,
)
from ..selection import (
    ConfidenceRule,
    MemoryBank,
    SampleRecord,
    bank_draw,
    is_confident,
    sampling_weight,
    select_representatives,
)
from ..streamgen import Frame, Video
from .augment import AugmentSpec, sample_transform
from .losses import FrameBatch, LossWeights, confident_epe, loss_adapt, loss_aug, loss_proj

log = logging.getLogger(__name__)

MODES = ("single", "pervideo", "full")


@dataclass(frozen=True)
class TwoStageConfig:
    cos_sim_stop_threshold: float = 0.9999
    stage1_max_iters: int = 10
    stage2_epe_threshold_px: float = 15.0
    stage2_max_iters: int = 30
    feature_layer: int = -1

    def __post_init__(self):
        if self.cos_sim_stop_threshold <= 0 or self.stage2_epe_threshold_px <= 0:
            raise ValueError("thresholds must be positive")
        if self.stage1_max_iters < 0 or self.stage2_max_iters < 0:
            raise ValueError("iteration limits must be non-negative")


@dataclass(frozen=True)
class PipelineMode:
    kind: str = "full"
    aggregation: bool = True
    local_aug: bool = True
    two_stage: bool = True
    pseudo_label: str = "adaptive"   # weak | strong | adaptive
    sampling: str = "clustered"      # uniform | weight | balanced | clustered

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown pipeline mode {self.kind!r}")
        if self.pseudo_label not in ("weak", "strong", "adaptive"):
            raise ValueError(f"unknown pseudo-label mode {self.pseudo_label!r}")
        if self.sampling not in ("uniform", "weight", "balanced", "clustered"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")

    @classmethod
    def preset(cls, kind: str, **switches) -> "PipelineMode":
        """Full method turns every component on; the baselines turn them off."""
        on = kind == "full"
        base = cls(kind, aggregation=on, local_aug=on, two_stage=on)
        return replace(base, **switches)


@dataclass(frozen=True)
class EngineConfig:
    weights: LossWeights = LossWeights()
    two_stage: TwoStageConfig = TwoStageConfig()
    rule: ConfidenceRule = ConfidenceRule()
    lr_stream: float = 2e-4
    momentum_stream: float = 0.5
    lr_agg: float = 2e-3
    momentum_agg: float = 0.7
    batch_agg: int = 8
    agg_epochs: int = 1
    n_clusters: int = 15
    n_v: int = 160
    window: int = 5
    ema_decay: float = 0.99
    pseudo_label_source: str = "teacher"  # or "student"
    separate_aug_optimizer: bool = True
    aug_target: str = "adapted"  # "adapted" | "teacher" | "current"
    # two-stage off: run stage 1 first and keep both stages (True), or only
    # the threshold-stopped fit (False)
    unsplit_stage1: bool = True
    weak_aug: AugmentSpec = AugmentSpec("weak")
    strong_aug: AugmentSpec = AugmentSpec("strong")
    supervise_hidden: bool = False
    seed: int = 22


# ---------------------------------------------------------------------------
# learner state

class Learner:
    """Student, its stream optimizer and the mean teacher."""

    def __init__(self, student: dm.RegressorState, cfg: EngineConfig):
        self.cfg = cfg
        self.student = student
        self.adam = dm.AdamState.like(student, cfg.lr_stream, cfg.momentum_stream)
        self.aug_adam = dm.AdamState.like(student, cfg.lr_stream, cfg.momentum_stream)
        self.teacher = dm.TeacherState.from_student(student, cfg.ema_decay)
        self.steps = 0

    def step(self, grad: np.ndarray, persist: bool = True, adam: dm.AdamState | None = None):
        dm.adam_step(self.student, adam or self.adam, grad)
        self.steps += 1
        if persist:
            dm.ema_update(self.teacher, self.student)

    def snapshot(self) -> dm.Snapshot:
        return dm.snapshot(self.student, self.adam)

    def checkpoint(self):
        return self.snapshot(), self.aug_adam.copy(), self.teacher.flat.copy()

    def rollback(self, saved):
        snap, aug_adam, teacher_flat = saved
        self.student, self.adam = dm.restore(snap)
        self.aug_adam = aug_adam.copy()
        self.teacher.flat = teacher_flat.copy()

    def reset_to(self, snap: dm.Snapshot):
        """Load parameters from ``snap`` with a fresh stream optimizer and teacher."""
        self.student, _ = dm.restore(snap)
        self.adam = dm.AdamState.like(self.student, self.cfg.lr_stream, self.cfg.momentum_stream)
        self.aug_adam = dm.AdamState.like(self.student, self.cfg.lr_stream, self.cfg.momentum_stream)
        self.teacher = dm.TeacherState.from_student(self.student, self.cfg.ema_decay)


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def _projected(params, skel, batch: FrameBatch):
    P = forward_kinematics(skel, params)
    return batch.focal[:, None, None] * P[..., :2] / P[..., 2:3] + batch.principal[:, None, :]


# ---------------------------------------------------------------------------
# per-frame stages

def stage1_adapt(learner: Learner, batch: FrameBatch, cfg: EngineConfig, skel: SkeletonTemplate):
    """Adapt on the projection loss until the last-hidden-layer features drift
    (cosine similarity to the frame-start features below the threshold), the
    gradient vanishes, or the iteration cap is hit. Returns the iteration
    count, the snapshot handed to the next frame and the final evaluation."""
    ts = cfg.two_stage
    fn = lambda p: loss_proj(p, batch, skel, cfg.weights, cfg.rule.keypoint_threshold)
    ev = dm.evaluate(learner.student, batch.features)
    h0 = ev.hidden(ts.feature_layer)
    iters = 0
    for _ in range(ts.stage1_max_iters):
        _, grad = dm.loss_gradient(learner.student, batch.features, fn, ev)
        learner.step(grad)
        iters += 1
        ev = dm.evaluate(learner.student, batch.features)
        if not np.any(grad) or _cosine(h0, ev.hidden(ts.feature_layer)) < ts.cos_sim_stop_threshold:
            break
    return iters, learner.snapshot(), ev


def stage2_adapt(learner: Learner, batch: FrameBatch, cfg: EngineConfig, skel: SkeletonTemplate,
                 ev: dm.Evaluation | None = None, *, threshold=None, max_iters=None, persist=False):
    """Keep fitting the 2D projection until the confident-keypoint EPE drops to
    the threshold. With ``persist=False`` this runs on a throwaway copy and
    the learner is untouched. Returns (iterations, params of the lowest-EPE
    iterate)."""
    ts = cfg.two_stage
    threshold = ts.stage2_epe_threshold_px if threshold is None else threshold
    max_iters = ts.stage2_max_iters if max_iters is None else max_iters
    tau = cfg.rule.keypoint_threshold
    if persist:
        state, adam = learner.student, learner.adam
    else:
        state, adam = learner.student.copy(), learner.adam.copy()
    fn = lambda p: loss_proj(p, batch, skel, cfg.weights, tau)
    if ev is None:
        ev = dm.evaluate(state, batch.features)
    best_params, best_epe = ev.params, np.inf
    iters = 0
    while True:
        epe = confident_epe(_projected(ev.params, skel, batch)[0], batch.est_2d[0], batch.conf[0], tau)
        if epe < best_epe:
            best_params, best_epe = ev.params, epe
        if epe <= threshold or iters >= max_iters:
            break
        _, grad = dm.loss_gradient(state, batch.features, fn, ev)
        if persist:
            learner.step(grad)
        else:
            dm.adam_step(state, adam, grad)
        iters += 1
        ev = dm.evaluate(state, batch.features)
    return iters, best_params if not persist else ev.params


def local_augmentation(learner: Learner, window: list[SampleRecord], current_conf: np.ndarray,
                       cfg: EngineConfig, skel: SkeletonTemplate, rng) -> int:
    """One Adam step on the augmentation-consistency loss per confident frame
    in ``window`` (chronological). Keypoints confident there but not in the
    current frame are occluded in the augmented view. Returns the step count."""
    tau = cfg.rule.keypoint_threshold
    cur_bad = current_conf <= tau
    steps = 0
    for rec in window:
        if not rec.confident:
            continue
        batch = FrameBatch.from_records([rec])
        if cfg.aug_target == "adapted" and rec.adapted_3d is not None:
            batch.pred_3d = rec.adapted_3d[None]
        elif cfg.aug_target == "current":
            batch.pred_3d = forward_kinematics(skel, dm.predict(learner.student, batch.features))
        occlude = ((rec.confidence > tau) & cur_bad)[None]
        t = sample_transform(cfg.strong_aug, rng, batch.principal, len(current_conf), occlude, batch.features)
        feats = t.apply_features(batch.features)
        fn = lambda p: loss_aug(p, batch, skel, t, cfg.weights, tau, cfg.supervise_hidden)
        _, grad = dm.loss_gradient(learner.student, feats, fn)
        learner.step(grad, adam=learner.aug_adam if cfg.separate_aug_optimizer else None)
        steps += 1
    return steps


def adaptive_aggregation(video_start: dm.Snapshot, bank: MemoryBank, cfg: EngineConfig,
                         skel: SkeletonTemplate, rng, pseudo_label: str = "adaptive") -> tuple[dm.RegressorState, int]:
    """Restore the video-start model and train it for ``agg_epochs`` over
    ``n_v`` records drawn from the bank. Returns the model and step count."""
    state, _ = dm.restore(video_start)
    if len(bank) == 0:
        return state, 0
    drawn = bank_draw(bank, cfg.n_v, rng)
    adam = dm.AdamState.like(state, cfg.lr_agg, cfg.momentum_agg)
    tau = cfg.rule.keypoint_threshold
    steps = 0
    for _ in range(cfg.agg_epochs):
        order = rng.permutation(len(drawn))
        for s in range(0, len(order), cfg.batch_agg):
            recs = [drawn[i] for i in order[s:s + cfg.batch_agg]]
            batch = FrameBatch.from_records(recs)
            t = sample_transform(cfg.weak_aug, rng, batch.principal, batch.conf.shape[1])
            feats = t.apply_features(batch.features)
            fn = lambda p: loss_adapt(p, batch, skel, t, cfg.weights, tau, pseudo_label)
            _, grad = dm.loss_gradient(state, feats, fn)
            dm.adam_step(state, adam, grad)
            steps += 1
    return state, steps


# ---------------------------------------------------------------------------
# reports

ROW_FIELDS = ("video_id", "frame_id", "confident", "mpjpe_mm", "pa_mpjpe_mm", "epe2d_px",
              "stage1_iters", "stage2_iters", "localaug_steps")


@dataclass
class FrameRow:
    video_id: int
    frame_id: int
    confident: bool
    mpjpe_mm: float
    pa_mpjpe_mm: float
    epe2d_px: float
    stage1_iters: int = 0
    stage2_iters: int = 0
    localaug_steps: int = 0


@dataclass
class RunReport:
    rows: list[FrameRow] = field(default_factory=list)
    label: str = ""
    aggregation_steps: int = 0
    aborted_frames: int = 0

    def column(self, name, subset="all"):
        rows = self.rows
        if subset == "conf":
            rows = [r for r in rows if r.confident]
        elif subset == "nonconf":
            rows = [r for r in rows if not r.confident]
        return np.array([getattr(r, name) for r in rows], dtype=float)

    def mean(self, name="mpjpe_mm", subset="all") -> float:
        col = self.column(name, subset)
        return float(col.mean()) if len(col) else float("nan")

    def summary(self) -> dict:
        out = {}
        for subset in ("all", "conf", "nonconf"):
            out[subset] = {
                "frames": len(self.column("mpjpe_mm", subset)),
                **{m: self.mean(m, subset) for m in ("mpjpe_mm", "pa_mpjpe_mm", "epe2d_px")},
            }
        return out

    def write_csv(self, path) -> None:
        """Per-frame rows followed by a ``#``-prefixed aggregate footer."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow([r.video_id, r.frame_id, int(r.confident), _num(r.mpjpe_mm), _num(r.pa_mpjpe_mm),
                            _num(r.epe2d_px), r.stage1_iters, r.stage2_iters, r.localaug_steps])
            s = self.summary()
            w.writerow(["# aggregate", "subset", "frames", "mpjpe_mm", "pa_mpjpe_mm", "epe2d_px"])
            for subset, vals in s.items():
                w.writerow(["#", subset, vals["frames"], _num(vals["mpjpe_mm"]), _num(vals["pa_mpjpe_mm"]),
                            _num(vals["epe2d_px"])])

    def write_split_csv(self, path) -> None:
        """One row per metric with All / Conf. / Non-conf. columns."""
        s = self.summary()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "metric", "all", "conf", "nonconf"])
            for m in ("mpjpe_mm", "pa_mpjpe_mm", "epe2d_px"):
                w.writerow([self.label, m] + [_num(s[k][m]) for k in ("all", "conf", "nonconf")])

    @classmethod
    def read_csv(cls, path, label="") -> "RunReport":
        rows = []
        with Path(path).open() as fh:
            for rec in csv.DictReader(line for line in fh if not line.startswith("#")):
                rows.append(FrameRow(int(rec["video_id"]), int(rec["frame_id"]), rec["confident"] == "1",
                                     float(rec["mpjpe_mm"]), float(rec["pa_mpjpe_mm"]), float(rec["epe2d_px"]),
                                     int(rec["stage1_iters"]), int(rec["stage2_iters"]), int(rec["localaug_steps"])))
        return cls(rows, label)


def _num(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# driver

class StreamRunner:
    """Runs one pipeline over a list of videos, strictly frame by frame."""

    def __init__(self, pretrained: dm.RegressorState, mode: PipelineMode, cfg: EngineConfig = EngineConfig(),
                 skel: SkeletonTemplate | None = None, seed: int | None = None, observer=None):
        self.pretrained = dm.snapshot(pretrained)
        self.mode = mode
        self.cfg = cfg
        self.skel = skel or default_skeleton()
        self.seed = cfg.seed if seed is None else seed
        # observer(event, **info) receives "frame_end" / "frame_start" events; used by tests
        self.observer = observer

    def _rng(self, *key):
        return np.random.default_rng([self.seed, *key])

    def _notify(self, event, **info):
        if self.observer is not None:
            self.observer(event, **info)

    def run(self, videos: list[Video]) -> RunReport:
        report = RunReport(label=self.mode.kind)
        if not videos:
            return report
        learner = Learner(dm.restore(self.pretrained)[0], self.cfg)
        bank = MemoryBank()
        video_start = self.pretrained
        for vi, video in enumerate(videos):
            if vi > 0 and self.mode.kind == "pervideo":
                learner.reset_to(self.pretrained)
            elif vi > 0 and self.mode.kind == "full":
                learner.reset_to(video_start)
            elif vi == 0:
                learner.reset_to(self.pretrained)
            video_start = learner.snapshot()
            records = self._run_video(learner, video, report)
            if self.mode.kind == "full" and self.mode.aggregation:
                bank.extend(select_representatives(records, self.cfg.n_v, self.cfg.n_clusters,
                                                   seed=self.seed + 7919 * video.video_id,
                                                   strategy=self.mode.sampling))
                state, steps = adaptive_aggregation(video_start, bank, self.cfg, self.skel,
                                                    self._rng(4, video.video_id), self.mode.pseudo_label)
                report.aggregation_steps += steps
                video_start = dm.snapshot(state)
        return report

    def _run_video(self, learner: Learner, video: Video, report: RunReport) -> list[SampleRecord]:
        cfg, skel = self.cfg, self.skel
        records: list[SampleRecord] = []
        for frame in video.frames:
            conf = frame.est_2d.confidence
            confident = is_confident(conf, cfg.rule)
            batch = FrameBatch.single(frame.features, frame.est_2d.points, conf, frame.camera)
            saved = learner.checkpoint()
            self._notify("frame_start", frame=frame, learner=learner)
            n1 = n2 = n_la = 0
            try:
                if self.mode.local_aug and not confident:
                    window = records[-cfg.window:]
                    n_la = local_augmentation(learner, window, conf, cfg, skel,
                                              self._rng(3, frame.video_id, frame.frame_id))
                if self.mode.two_stage:
                    n1, snap1, ev = stage1_adapt(learner, batch, cfg, skel)
                    n2, params = stage2_adapt(learner, batch, cfg, skel, ev)
                else:
                    snap1, ev = None, None
                    if cfg.unsplit_stage1:
                        n1, _, ev = stage1_adapt(learner, batch, cfg, skel)
                    n2, params = stage2_adapt(learner, batch, cfg, skel, ev, persist=True)
                pred = forward_kinematics(skel, params)[0]
                pred_2d = project_points(pred, frame.camera)
            except (dm.GradientError, ProjectionError, FloatingPointError) as exc:
                log.warning("frame %d/%d aborted: %s", frame.video_id, frame.frame_id, exc)
                learner.rollback(saved)
                report.aborted_frames += 1
                snap1 = None
                pred = forward_kinematics(skel, dm.predict(learner.student, frame.features))
                pred_2d = _safe_project(pred, frame.camera)
            self._notify("frame_end", frame=frame, learner=learner, stage1_snapshot=snap1)
            report.rows.append(FrameRow(
                frame.video_id, frame.frame_id, confident,
                float(mpjpe(pred, frame.gt_3d)), float(pa_mpjpe(pred, frame.gt_3d)),
                float(epe_2d(pred_2d, frame.gt_2d.points)), n1, n2, n_la,
            ))
            if cfg.pseudo_label_source == "teacher":
                teacher = learner.teacher.as_regressor(learner.student)
                label = forward_kinematics(skel, dm.predict(teacher, frame.features))
            else:
                label = pred
            records.append(SampleRecord(
                features=frame.features, est_2d=frame.est_2d.points, confidence=conf,
                pred_3d=label, camera=frame.camera, weight=sampling_weight(conf),
                confident=confident, video_id=frame.video_id, frame_id=frame.frame_id, adapted_3d=pred,
            ))
        return records


def _safe_project(pred, cam):
    z = np.maximum(pred[..., 2:3], 1e-3)
    return cam.focal * pred[..., :2] / z + np.asarray(cam.principal)


def run_stream(mode: PipelineMode, videos: list[Video], pretrained: dm.RegressorState,
               cfg: EngineConfig = EngineConfig(), skel: SkeletonTemplate | None = None,
               seed: int | None = None) -> RunReport:
    return StreamRunner(pretrained, mode, cfg, skel, seed).run(videos)

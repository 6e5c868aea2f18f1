"""Synthetic source data and domain-shifted test video streams.

The test domain differs from the source in three ways: the regressor's input
features are distorted (a shared target-domain distortion plus a per-video
one), per-video camera focal lengths are jittered, and joint angles range
wider than in the source. A simulated 2D estimator adds temporally
correlated noise whose level, and hence reported confidence, depends on
whether a keypoint is visible, occluded or truncated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .kinematics import (
    BETA_DIM,
    Camera,
    Keypoints2D,
    PoseParams,
    SkeletonTemplate,
    default_skeleton,
    forward_kinematics,
    project_points,
)

VISIBLE, OCCLUDED, TRUNCATED = 0, 1, 2
# pixels per unit of normalized feature coordinate (half the default image)
FEATURE_HALF_SPAN = 128.0

# (joint, component) -> (mean, half range) in radians for the source domain.
# Components are rotations about camera-frame x (pitch), y (yaw), z (roll).
_ANGLE_TABLE = {
    0: [(0.0, 0.15), (0.0, 0.6), (0.0, 0.1)],
    1: [(0.1, 0.25), (0.0, 0.3), (0.0, 0.15)],
    3: [(0.0, 0.7), (0.0, 0.3), (0.3, 0.6)],
    4: [(-0.5, 0.5), (0.0, 0.1), (0.0, 0.1)],
    6: [(0.0, 0.7), (0.0, 0.3), (-0.3, 0.6)],
    7: [(-0.5, 0.5), (0.0, 0.1), (0.0, 0.1)],
    9: [(-0.15, 0.45), (0.0, 0.2), (0.05, 0.2)],
    10: [(0.35, 0.35), (0.0, 0.05), (0.0, 0.05)],
    12: [(-0.15, 0.45), (0.0, 0.2), (-0.05, 0.2)],
    13: [(0.35, 0.35), (0.0, 0.05), (0.0, 0.05)],
}

# keypoint groups an occluder can hide
_OCCLUDER_GROUPS = (
    (9, 10, 11, 12, 13, 14),
    (3, 4, 5, 9, 10, 11),
    (6, 7, 8, 12, 13, 14),
    (3, 4, 5, 6, 7, 8),
    (2, 4, 5, 7, 8),
)


class StreamFormatError(ValueError):
    pass


@dataclass
class StreamConfig:
    video_count: int = 8
    frames_per_video: int = 200
    source_size: int = 20000
    # pose distributions
    target_range_scale: float = 1.5
    target_mean_shift: float = 0.15
    step_bound: float = 0.08
    beta_sigma_source: float = 0.04
    beta_sigma_target: float = 0.08
    # domain shift
    shift_magnitude: float = 0.12
    shift_shared_fraction: float = 0.9
    focal_jitter: float = 0.1
    feature_noise: float = 0.004
    source_occlusion_rate: float = 0.3
    # simulated 2D estimator
    noise_sigma_base: float = 12.0
    noise_temporal_corr: float = 0.7
    noise_dist: str = "gaussian"  # or "student_t"
    event_rate: float = 0.25
    event_mean_length: float = 3.0
    event_noise_multiplier: float = 6.0
    event_hidden_min: int = 8
    event_hidden_max: int = 14
    conf_scale: float = 100.0
    conf_jitter: float = 0.05
    seed: int = 22

    def __post_init__(self):
        if self.video_count < 1 or self.frames_per_video < 2:
            raise ValueError("need at least one video of two frames")
        if not 0 <= self.event_rate <= 1 or not 0 <= self.shift_shared_fraction <= 1:
            raise ValueError("rates must lie in [0, 1]")
        if min(self.noise_sigma_base, self.shift_magnitude, self.focal_jitter, self.feature_noise) < 0:
            raise ValueError("noise and shift scales must be non-negative")
        if not 1 <= self.event_hidden_min <= self.event_hidden_max:
            raise ValueError("event_hidden_min must be in [1, event_hidden_max]")
        if self.noise_dist not in ("gaussian", "student_t"):
            raise ValueError(f"unknown noise_dist {self.noise_dist!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Frame:
    video_id: int
    frame_id: int
    features: np.ndarray
    gt_params: PoseParams
    gt_3d: np.ndarray
    gt_2d: Keypoints2D
    est_2d: Keypoints2D
    mask: np.ndarray
    camera: Camera


@dataclass
class Video:
    video_id: int
    frames: list[Frame] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


# ---------------------------------------------------------------------------
# feature encoding

def feature_dim(joint_count: int) -> int:
    return 3 * joint_count


def encode_features(points: np.ndarray, cam: Camera, visible=None) -> np.ndarray:
    """Keypoint pixels -> [normalized coords (2J), visibility flags (J)].

    Hidden keypoints get zero coordinates and a zero flag.
    """
    J = points.shape[-2]
    coords = (points - np.asarray(cam.principal)) / FEATURE_HALF_SPAN
    vis = np.ones(points.shape[:-1]) if visible is None else np.asarray(visible, dtype=float)
    coords = coords * vis[..., None]
    return np.concatenate([coords.reshape(points.shape[:-2] + (2 * J,)), vis], axis=-1)


def decode_features(features: np.ndarray, cam: Camera) -> np.ndarray:
    J = features.shape[-1] // 3
    coords = features[..., :2 * J].reshape(features.shape[:-1] + (J, 2))
    return coords * FEATURE_HALF_SPAN + np.asarray(cam.principal)


# ---------------------------------------------------------------------------
# pose sampling

def angle_bounds(joint_count: int, domain: str, config: StreamConfig):
    """Per-component (mean, low, high) arrays for ``domain`` in {"source", "target"}."""
    mean = np.zeros((joint_count, 3))
    half = np.zeros((joint_count, 3))
    for j, comps in _ANGLE_TABLE.items():
        for c, (m, r) in enumerate(comps):
            mean[j, c], half[j, c] = m, r
    if domain == "target":
        # shift each dof outward along a fixed alternating pattern
        sign = np.where((np.arange(joint_count * 3) % 2) == 0, 1.0, -1.0).reshape(joint_count, 3)
        mean = mean + config.target_mean_shift * sign * (half > 0)
        half = half * config.target_range_scale
    return mean, mean - half, mean + half


def sample_source_poses(n: int, config: StreamConfig, rng, skel: SkeletonTemplate):
    J = skel.joint_count
    mean, lo, hi = angle_bounds(J, "source", config)
    theta = rng.uniform(lo, hi, size=(n, J, 3))
    beta = np.clip(1.0 + config.beta_sigma_source * rng.standard_normal((n, BETA_DIM)), 0.5, 2.0)
    trans = np.stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.15, 0.15, n), rng.uniform(4.5, 6.0, n)], axis=1)
    return PoseParams(theta, beta, trans)


def generate_source(config: StreamConfig, skel: SkeletonTemplate | None = None, n: int | None = None):
    """Labelled source-domain samples as ``(features (N, 3J), PoseParams batch)``."""
    skel = skel or default_skeleton()
    n = config.source_size if n is None else n
    rng = np.random.default_rng([config.seed, 1])
    params = sample_source_poses(n, config, rng, skel)
    cam = Camera()
    pts = project_points(forward_kinematics(skel, params), cam)
    vis = np.ones((n, skel.joint_count))
    occ = rng.random(n) < config.source_occlusion_rate
    for i in np.flatnonzero(occ):
        group = _OCCLUDER_GROUPS[rng.integers(len(_OCCLUDER_GROUPS))]
        k = rng.integers(2, len(group) + 1)
        vis[i, rng.choice(group, size=k, replace=False)] = 0.0
    feats = encode_features(pts, cam, vis)
    J2 = 2 * skel.joint_count
    feats[:, :J2] += config.feature_noise * rng.standard_normal((n, J2)) * np.repeat(vis, 2, axis=1)
    return feats, params


# ---------------------------------------------------------------------------
# test streams

def _random_walk(rng, m, lo, hi, step_bound):
    shape = lo.shape
    theta = np.empty((m,) + shape)
    theta[0] = rng.uniform(lo, hi)
    vel = np.zeros(shape)
    active = hi > lo
    for t in range(1, m):
        vel = 0.85 * vel + 0.35 * step_bound * rng.standard_normal(shape)
        vel = np.clip(vel, -step_bound, step_bound) * active
        nxt = theta[t - 1] + vel
        over, under = nxt > hi, nxt < lo
        vel = np.where(over | under, -vel, vel)
        nxt = np.where(over | under, theta[t - 1] + vel, nxt)
        theta[t] = np.clip(nxt, lo, hi)
    return theta


def _event_schedule(rng, m, config):
    """Per-frame event flags from a two-state Markov chain with stationary rate ``event_rate``."""
    rate, L = config.event_rate, max(config.event_mean_length, 1.0)
    if rate <= 0:
        return np.zeros(m, dtype=bool)
    if rate >= 1:
        return np.ones(m, dtype=bool)
    p_stop = 1.0 / L
    p_start = min(1.0, rate * p_stop / (1.0 - rate))
    on = np.zeros(m, dtype=bool)
    state = rng.random() < rate
    for t in range(m):
        on[t] = state
        state = (rng.random() >= p_stop) if state else (rng.random() < p_start)
    return on


def _event_masks(rng, pts, on, cam, config):
    """EventMask per frame plus per-frame cameras (truncation crops the image)."""
    m, J = pts.shape[:2]
    masks = np.where(cam.in_bounds(pts), VISIBLE, TRUNCATED).astype(np.int8)
    cams = [cam] * m
    t = 0
    while t < m:
        if not on[t]:
            t += 1
            continue
        end = t
        while end < m and on[end]:
            end += 1
        kind = rng.random()
        n_hidden = min(int(rng.integers(config.event_hidden_min, config.event_hidden_max + 1)), J - 1)
        if kind < 0.6:
            group = _OCCLUDER_GROUPS[rng.integers(len(_OCCLUDER_GROUPS))]
            hidden = list(group)
            extra = [k for k in range(J) if k not in hidden]
            while len(hidden) < n_hidden:
                hidden.append(extra.pop(rng.integers(len(extra))))
            masks[t:end, hidden] = OCCLUDED
        else:
            axis = int(rng.integers(2))  # crop right (x) or bottom (y)
            for u in range(t, end):
                order = np.sort(pts[u, :, axis])
                lo_px = cam.principal[axis] + 1.0
                cut = 0.5 * (order[-n_hidden] + order[-n_hidden - 1])
                cut = max(cut, lo_px)
                size = list(cam.image_size)
                size[axis] = cut
                crop = Camera(cam.focal, cam.principal, tuple(size))
                cams[u] = crop
                masks[u, ~crop.in_bounds(pts[u])] = TRUNCATED
        t = end
    return masks, cams


def _unit_noise(rng, shape, config):
    if config.noise_dist == "student_t":
        df = 3.0
        return rng.standard_t(df, size=shape) / np.sqrt(df / (df - 2.0))
    return rng.standard_normal(shape)


def simulate_estimator(gt_2d: np.ndarray, mask: np.ndarray, config: StreamConfig, rng,
                       prev_unit: np.ndarray | None = None):
    """Noisy 2D keypoints with confidence for one frame.

    Noise per keypoint has standard deviation ``noise_sigma_base`` (visible)
    or ``noise_sigma_base * event_noise_multiplier`` (occluded / truncated),
    drawn from a unit AR(1) process across frames so estimator errors are
    temporally coherent. Returns the keypoints and the unit noise state.
    """
    J = gt_2d.shape[0]
    sigma = np.full(J, float(config.noise_sigma_base))
    sigma[mask != VISIBLE] *= config.event_noise_multiplier
    fresh = _unit_noise(rng, (J, 2), config)
    if prev_unit is None:
        unit = fresh
    else:
        rho = config.noise_temporal_corr
        unit = rho * prev_unit + np.sqrt(1.0 - rho * rho) * fresh
    est = gt_2d + sigma[:, None] * unit
    conf = np.exp(-sigma / config.conf_scale) + rng.uniform(-config.conf_jitter, config.conf_jitter, J)
    return Keypoints2D(est, np.clip(conf, 0.0, 1.0)), unit


class DomainShift:
    """Feature distortion ``f -> f + A f + b`` applied to the coordinate block."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        self.A, self.b = A, b

    def apply(self, features: np.ndarray) -> np.ndarray:
        n = self.b.shape[0]
        out = features.copy()
        coords = features[..., :n]
        vis = np.repeat(features[..., n:], 2, axis=-1)
        out[..., :n] = coords + (coords @ self.A.T + self.b) * vis
        return out


def _shift_component(rng, n):
    return rng.standard_normal((n, n)) / np.sqrt(n), rng.standard_normal(n)


def video_shifts(config: StreamConfig, joint_count: int) -> list[DomainShift]:
    n = 2 * joint_count
    rng = np.random.default_rng([config.seed, 2])
    A_s, b_s = _shift_component(rng, n)
    shifts = []
    w_s = np.sqrt(config.shift_shared_fraction)
    w_v = np.sqrt(1.0 - config.shift_shared_fraction)
    for _ in range(config.video_count):
        A_v, b_v = _shift_component(rng, n)
        mag = config.shift_magnitude
        shifts.append(DomainShift(mag * (w_s * A_s + w_v * A_v), 0.5 * mag * (w_s * b_s + w_v * b_v)))
    return shifts


def generate_video(config: StreamConfig, video_id: int, skel: SkeletonTemplate | None = None,
                   shift: DomainShift | None = None) -> Video:
    skel = skel or default_skeleton()
    J, m = skel.joint_count, config.frames_per_video
    rng = np.random.default_rng([config.seed, 3, video_id])
    if shift is None:
        shift = video_shifts(config, J)[video_id % config.video_count]
    _, lo, hi = angle_bounds(J, "target", config)
    theta = _random_walk(rng, m, lo, hi, config.step_bound)
    beta = np.clip(1.0 + config.beta_sigma_target * rng.standard_normal(BETA_DIM), 0.5, 2.0)
    start = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.15, 0.15), rng.uniform(4.6, 5.8)])
    drift = np.cumsum(0.004 * rng.standard_normal((m, 3)), axis=0)
    trans = start + drift
    trans[:, 2] = np.clip(trans[:, 2], 4.0, 6.5)
    params = PoseParams(theta, np.broadcast_to(beta, (m, BETA_DIM)).copy(), trans)
    focal = 500.0 * (1.0 + rng.uniform(-config.focal_jitter, config.focal_jitter))
    cam = Camera(focal)
    joints = forward_kinematics(skel, params)
    pts = project_points(joints, cam)
    on = _event_schedule(rng, m, config)
    masks, cams = _event_masks(rng, pts, on, cam, config)
    vis = (masks == VISIBLE).astype(float)
    feats = encode_features(pts, cam, vis)
    feats[:, :2 * J] += config.feature_noise * rng.standard_normal((m, 2 * J)) * np.repeat(vis, 2, axis=1)
    feats = shift.apply(feats)
    video = Video(video_id)
    unit = None
    for t in range(m):
        est, unit = simulate_estimator(pts[t], masks[t], config, rng, unit)
        video.frames.append(Frame(
            video_id=video_id, frame_id=t, features=feats[t], gt_params=params[t],
            gt_3d=joints[t], gt_2d=Keypoints2D(pts[t]), est_2d=est, mask=masks[t], camera=cams[t],
        ))
    return video


def generate_streams(config: StreamConfig, skel: SkeletonTemplate | None = None) -> list[Video]:
    skel = skel or default_skeleton()
    shifts = video_shifts(config, skel.joint_count)
    return [generate_video(config, i, skel, shifts[i]) for i in range(config.video_count)]


# ---------------------------------------------------------------------------
# line-delimited stream records

_HEADER = "#posetta-stream"


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


def frame_record(frame: Frame) -> str:
    cam = frame.camera
    fields_ = [
        f"video_id={frame.video_id}",
        f"frame_id={frame.frame_id}",
        f"camera={_fmt([cam.focal, *cam.principal, *cam.image_size])}",
        f"features={_fmt(frame.features)}",
        f"gt_params={_fmt(frame.gt_params.vector())}",
        f"gt_2d={_fmt(frame.gt_2d.points)}",
        f"est_2d={_fmt(frame.est_2d.points)}",
        f"conf={_fmt(frame.est_2d.confidence)}",
        "mask=" + ",".join(str(int(v)) for v in frame.mask),
    ]
    return " ".join(fields_)


def write_stream(path, videos: list[Video], config: StreamConfig | None = None) -> None:
    J = videos[0][0].gt_3d.shape[0] if videos and len(videos[0]) else 15
    feat = videos[0][0].features.shape[0] if videos and len(videos[0]) else feature_dim(J)
    digest = config.digest() if config is not None else "none"
    lines = [f"{_HEADER} J={J} features={feat} videos={len(videos)} config={digest}"]
    for v in videos:
        lines.extend(frame_record(f) for f in v.frames)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_record(line: str, J: int, n_feat: int, skel: SkeletonTemplate) -> Frame:
    kv = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ValueError(f"token {tok!r} is not key=value")
        kv[key] = val
    expected = {"camera": 5, "features": n_feat, "gt_params": 3 * J + BETA_DIM + 3,
                "gt_2d": 2 * J, "est_2d": 2 * J, "conf": J, "mask": J}
    arrays = {}
    for key, n in expected.items():
        if key not in kv:
            raise ValueError(f"missing field {key!r}")
        vals = kv[key].split(",")
        if len(vals) != n:
            raise ValueError(f"field {key!r} has {len(vals)} values, expected {n}")
        arrays[key] = np.array([float(x) for x in vals])
    c = arrays["camera"]
    cam = Camera(c[0], (c[1], c[2]), (c[3], c[4]))
    params = PoseParams.from_vector(arrays["gt_params"], J)
    return Frame(
        video_id=int(kv["video_id"]), frame_id=int(kv["frame_id"]),
        features=arrays["features"], gt_params=params,
        gt_3d=forward_kinematics(skel, params),
        gt_2d=Keypoints2D(arrays["gt_2d"].reshape(J, 2)),
        est_2d=Keypoints2D(arrays["est_2d"].reshape(J, 2), arrays["conf"]),
        mask=arrays["mask"].astype(np.int8), camera=cam,
    )


def read_stream(path, skel: SkeletonTemplate | None = None) -> list[Video]:
    skel = skel or default_skeleton()
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].startswith(_HEADER):
        raise StreamFormatError(f"{path}: missing stream header")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    J, n_feat, n_videos = int(head["J"]), int(head["features"]), int(head["videos"])
    if J != skel.joint_count:
        raise StreamFormatError(f"{path}: stream has J={J}, skeleton has {skel.joint_count}")
    if not text.endswith("\n"):
        raise StreamFormatError(f"{path}: record {len(lines) - 1} (line {len(lines)}) is truncated")
    videos: dict[int, Video] = {}
    for lineno, line in enumerate(lines[1:-1], start=2):
        try:
            frame = _parse_record(line, J, n_feat, skel)
        except (ValueError, KeyError) as exc:
            raise StreamFormatError(f"{path}: record {lineno - 1} (line {lineno}): {exc}") from None
        videos.setdefault(frame.video_id, Video(frame.video_id)).frames.append(frame)
    if len(videos) != n_videos:
        raise StreamFormatError(f"{path}: header declares {n_videos} videos, found {len(videos)}")
    return [videos[k] for k in sorted(videos)]

"""Confidence partitioning, representative-sample selection and the memory bank."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import Camera, InvalidInputError


@dataclass(frozen=True)
class ConfidenceRule:
    keypoint_threshold: float = 0.8
    min_confident_count: int = 10

    def __post_init__(self):
        if not 0 < self.keypoint_threshold < 1:
            raise InvalidInputError("keypoint_threshold must lie in (0, 1)")
        if self.min_confident_count <= 0:
            raise InvalidInputError("min_confident_count must be positive")


def is_confident(conf: np.ndarray, rule: ConfidenceRule = ConfidenceRule()) -> bool:
    conf = np.asarray(conf)
    if rule.min_confident_count >= conf.shape[-1]:
        raise InvalidInputError("min_confident_count must be below the keypoint count")
    return bool(np.count_nonzero(conf > rule.keypoint_threshold) > rule.min_confident_count)


def sampling_weight(conf: np.ndarray) -> float:
    conf = np.asarray(conf, dtype=float)
    return float(conf.sum() / conf.shape[-1])


@dataclass(eq=False)
class SampleRecord:
    features: np.ndarray
    est_2d: np.ndarray
    confidence: np.ndarray
    pred_3d: np.ndarray
    camera: Camera
    weight: float
    confident: bool
    times_chosen: int = 0
    video_id: int = -1
    frame_id: int = -1
    adapted_3d: np.ndarray | None = None  # the prediction reported for this frame


@dataclass
class MemoryBank:
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def extend(self, records):
        self.records.extend(records)

    def draw_probabilities(self) -> np.ndarray:
        w = 1.0 / (1.0 + np.array([r.times_chosen for r in self.records], dtype=float))
        return w / w.sum()


def bank_draw(bank: MemoryBank, n: int, rng) -> list[SampleRecord]:
    """Draw ``n`` records without replacement, each with probability proportional
    to ``1 / (1 + times_chosen)``; drawn records have their count incremented."""
    if len(bank) == 0:
        return []
    if n < 1:
        raise InvalidInputError("draw size must be at least 1")
    n = min(n, len(bank))
    idx = rng.choice(len(bank), size=n, replace=False, p=bank.draw_probabilities())
    picked = [bank.records[i] for i in idx]
    for r in picked:
        r.times_chosen += 1
    return picked


# ---------------------------------------------------------------------------
# spherical k-means

@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: list[float]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def pose_vectors(poses: np.ndarray) -> np.ndarray:
    """Root-centred, flattened, unit-norm pose vectors."""
    poses = np.asarray(poses, dtype=float)
    X = (poses - poses[:, :1, :]).reshape(len(poses), -1)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < 1e-12):
        raise InvalidInputError("cannot normalize an all-zero pose vector")
    return X / norms[:, None]


def _normalize_rows(M):
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def spherical_kmeans(X: np.ndarray, k: int, seed=0, max_iter: int = 100) -> ClusterModel:
    """Cluster unit vectors by cosine similarity.

    Initial centroids are picked k-means++ style on cosine distance. Empty
    clusters are reseeded with the point least similar to its centroid.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n == 0:
        raise InvalidInputError("nothing to cluster")
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if np.any(np.abs(np.linalg.norm(X, axis=1) - 1.0) > 1e-6):
        X = _normalize_rows(X)
    k = min(k, n)
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    best = X @ X[chosen[0]]
    for _ in range(1, k):
        d = np.maximum(1.0 - best, 0.0)
        if d.sum() <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            c = int(rng.choice(remaining))
        else:
            c = int(rng.choice(n, p=d / d.sum()))
        chosen.append(c)
        best = np.maximum(best, X @ X[c])
    C = X[chosen].copy()

    assign = np.full(n, -1)
    trace = []
    for _ in range(max_iter):
        sims = X @ C.T
        new = np.argmax(sims, axis=1)
        trace.append(float(sims[np.arange(n), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = np.einsum("ij,ij->i", X, sums[assign] / np.maximum(counts[assign], 1)[:, None])
            far = int(np.argmin(own))
            counts[assign[far]] -= 1
            sums[assign[far]] -= X[far]
            assign[far] = j
            sums[j] = X[far]
            counts[j] = 1
        C = _normalize_rows(np.where(np.linalg.norm(sums, axis=1, keepdims=True) > 1e-12, sums, C))
        trace.append(float(np.einsum("ij,ij->i", X, C[assign]).sum()))
    return ClusterModel(C, assign, trace)


# ---------------------------------------------------------------------------
# quotas and representative selection

def allocate_quota(cluster_sizes, n_v: int) -> np.ndarray:
    """Split ``n_v`` samples across clusters proportionally to their sizes.

    Largest-remainder rounding, ties broken toward larger clusters, counts
    capped at cluster size with the shortfall handed to the largest clusters
    that still have room.
    """
    sizes = np.asarray(cluster_sizes, dtype=int)
    if np.any(sizes < 0) or n_v < 0:
        raise InvalidInputError("sizes and n_v must be non-negative")
    total = int(sizes.sum())
    counts = np.zeros(len(sizes), dtype=int)
    if total == 0 or n_v == 0:
        return counts
    target = min(n_v, total)
    ideal = sizes * n_v / total
    counts = np.minimum(np.floor(ideal).astype(int), sizes)
    rem = ideal - np.floor(ideal)
    # order: larger remainder first, then larger cluster, then lower index
    order = sorted(range(len(sizes)), key=lambda i: (-round(rem[i], 12), -sizes[i], i))
    for i in order:
        if counts.sum() >= target:
            break
        if counts[i] < sizes[i]:
            counts[i] += 1
    while counts.sum() < target:
        room = [i for i in range(len(sizes)) if counts[i] < sizes[i]]
        i = max(room, key=lambda i: (sizes[i] - counts[i], sizes[i], -i))
        counts[i] += 1
    return counts


def _pick_from_subset(idx, weights, vectors, quota, n_clusters, seed):
    if quota <= 0 or len(idx) == 0:
        return []
    model = spherical_kmeans(vectors[idx], min(n_clusters, len(idx)), seed=seed)
    sizes = np.bincount(model.assignments, minlength=model.k)
    counts = allocate_quota(sizes, quota)
    out = []
    for c in range(model.k):
        members = idx[model.assignments == c]
        # stable sort keeps chronological order among equal weights
        ranked = members[np.argsort(-weights[members], kind="stable")]
        out.extend(ranked[:counts[c]].tolist())
    return out


def select_representatives(records: list[SampleRecord], n_v: int, n_clusters: int = 15, seed=0,
                           strategy: str = "clustered") -> list[SampleRecord]:
    """Pick up to ``n_v`` representative records from one finished video.

    ``strategy``:
      * ``"clustered"``: balanced confident / non-confident split, spherical
        k-means within each subset, top-weight samples per cluster quota.
      * ``"balanced"``: balanced split, top-weight samples per subset.
      * ``"weight"``: weight-proportional random draw from the whole video.
      * ``"uniform"``: uniform random draw from the whole video.
    """
    n = len(records)
    if n == 0 or n_v <= 0:
        return []
    n_take = min(n_v, n)
    rng = np.random.default_rng(seed)
    weights = np.array([r.weight for r in records])
    if strategy == "uniform":
        idx = rng.choice(n, size=n_take, replace=False)
        return [records[i] for i in sorted(idx)]
    if strategy == "weight":
        p = weights + 1e-12
        idx = rng.choice(n, size=n_take, replace=False, p=p / p.sum())
        return [records[i] for i in sorted(idx)]
    if strategy not in ("clustered", "balanced"):
        raise InvalidInputError(f"unknown selection strategy {strategy!r}")

    conf_mask = np.array([r.confident for r in records])
    conf_idx, non_idx = np.flatnonzero(conf_mask), np.flatnonzero(~conf_mask)
    q_conf = min(len(conf_idx), n_take // 2)
    q_non = min(len(non_idx), n_take - q_conf)
    q_conf = min(len(conf_idx), n_take - q_non)
    k = n_clusters if strategy == "clustered" else 1
    vectors = pose_vectors(np.stack([r.pred_3d for r in records]))
    picked = (_pick_from_subset(conf_idx, weights, vectors, q_conf, k, seed)
              + _pick_from_subset(non_idx, weights, vectors, q_non, k, seed + 1))
    return [records[i] for i in sorted(picked)]

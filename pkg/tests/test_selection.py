import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posetta.kinematics import InvalidInputError, default_camera
from posetta.selection import (
    ConfidenceRule,
    MemoryBank,
    SampleRecord,
    allocate_quota,
    bank_draw,
    is_confident,
    pose_vectors,
    sampling_weight,
    select_representatives,
    spherical_kmeans,
)

J = 15


def record(conf=None, pose=None, confident=True, weight=1.0, frame_id=0, rng=None):
    rng = rng or np.random.default_rng(frame_id)
    return SampleRecord(
        features=np.zeros(3 * J), est_2d=np.zeros((J, 2)), confidence=np.ones(J) if conf is None else conf,
        pred_3d=rng.standard_normal((J, 3)) if pose is None else pose, camera=default_camera(),
        weight=weight, confident=confident, frame_id=frame_id,
    )


# --- confidence rule -------------------------------------------------------

def test_confidence_rule_examples():
    assert is_confident(np.ones(J))
    c = np.zeros(J)
    c[:10] = 0.9
    assert not is_confident(c)
    c[10] = 0.9
    assert is_confident(c)
    assert not is_confident(np.zeros(J))


def test_threshold_is_strict():
    assert not is_confident(np.full(J, 0.8))


def test_rule_validation():
    with pytest.raises(InvalidInputError):
        ConfidenceRule(1.2, 10)
    with pytest.raises(InvalidInputError):
        ConfidenceRule(0.8, 0)
    with pytest.raises(InvalidInputError):
        is_confident(np.ones(J), ConfidenceRule(0.8, J))


def test_sampling_weight():
    assert sampling_weight(np.ones(J)) == 1.0
    assert sampling_weight(np.full(J, 0.5)) == 0.5
    assert sampling_weight([1.0, 0.0, 0.5]) == 0.5


@given(st.lists(st.floats(0, 1), min_size=J, max_size=J))
def test_weight_in_unit_interval(c):
    assert 0.0 <= sampling_weight(c) <= 1.0


# --- spherical k-means -----------------------------------------------------

def unit(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_k1_centroid_is_normalized_mean():
    X = unit(np.random.default_rng(0), 30, 6)
    m = spherical_kmeans(X, 1, seed=0)
    mean = X.mean(0)
    np.testing.assert_allclose(m.centroids[0], mean / np.linalg.norm(mean), atol=1e-12)


def brute_force_2partition(X):
    best, best_lab = -np.inf, None
    n = len(X)
    for bits in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.min() == lab.max():
            continue
        obj = sum(np.linalg.norm(X[lab == c].sum(0)) for c in (0, 1))
        if obj > best:
            best, best_lab = obj, lab
    return best_lab


def test_two_groups_separate_like_brute_force():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(5)
    a /= np.linalg.norm(a)
    X = np.vstack([a + 0.2 * rng.standard_normal((5, 5)), -a + 0.2 * rng.standard_normal((5, 5))])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    m = spherical_kmeans(X, 2, seed=3)
    oracle = brute_force_2partition(X)
    same = (m.assignments == m.assignments[0]) == (oracle == oracle[0])
    assert same.all()


def test_objective_non_decreasing_on_100_instances():
    rng = np.random.default_rng(2)
    for i in range(100):
        n, d, k = rng.integers(5, 60), rng.integers(2, 12), rng.integers(1, 8)
        m = spherical_kmeans(unit(rng, n, d), int(k), seed=i)
        assert np.all(np.diff(m.objective_trace) >= -1e-9)


def test_cluster_invariants():
    rng = np.random.default_rng(3)
    X = unit(rng, 80, 9)
    m = spherical_kmeans(X, 6, seed=4)
    np.testing.assert_allclose(np.linalg.norm(m.centroids, axis=1), 1.0, atol=1e-9)
    for c in range(m.k):
        members = X[m.assignments == c]
        if len(members):
            mean = members.sum(0)
            np.testing.assert_allclose(m.centroids[c], mean / np.linalg.norm(mean), atol=1e-9)


def test_kmeans_deterministic_and_k_clamped():
    X = unit(np.random.default_rng(4), 20, 4)
    a, b = spherical_kmeans(X, 5, seed=9), spherical_kmeans(X, 5, seed=9)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert spherical_kmeans(X[:3], 10, seed=0).k == 3


def test_empty_clusters_are_reseeded():
    # duplicated points make empty clusters likely after the first assignment
    X = np.repeat(unit(np.random.default_rng(5), 3, 4), 5, axis=0)
    m = spherical_kmeans(X, 3, seed=0)
    assert len(np.unique(m.assignments)) == 3


def test_zero_pose_rejected():
    with pytest.raises(InvalidInputError):
        pose_vectors(np.zeros((2, J, 3)))


# --- quotas ----------------------------------------------------------------

def enumeration_oracle(sizes, n_v):
    """All integer allocations with the required total; keep those closest to the ideal."""
    total = min(n_v, sum(sizes))
    ideal = np.array(sizes) * n_v / sum(sizes)
    best, best_dev = [], np.inf
    for counts in itertools.product(*[range(s + 1) for s in sizes]):
        if sum(counts) != total:
            continue
        dev = np.max(np.abs(np.array(counts) - ideal)) if n_v <= sum(sizes) else 0
        if dev < best_dev - 1e-12:
            best, best_dev = [counts], dev
        elif abs(dev - best_dev) <= 1e-12:
            best.append(counts)
    return best


def test_quota_examples():
    assert allocate_quota([3, 1], 4).tolist() == [3, 1]
    assert allocate_quota([5, 3, 2], 5).tolist() == [3, 1, 1]
    assert allocate_quota([5, 3, 2], 0).tolist() == [0, 0, 0]
    assert allocate_quota([0, 0], 3).tolist() == [0, 0]


def test_quota_matches_enumeration_oracle():
    for n_clusters in range(1, 5):
        for sizes in itertools.product(range(0, 7), repeat=n_clusters):
            if sum(sizes) == 0 or sum(sizes) > 12:
                continue
            for n_v in range(0, 9):
                got = tuple(allocate_quota(sizes, n_v).tolist())
                assert sum(got) == min(n_v, sum(sizes))
                assert all(0 <= g <= s for g, s in zip(got, sizes))
                if n_v <= sum(sizes):
                    assert got in enumeration_oracle(sizes, n_v), (sizes, n_v, got)


@given(st.lists(st.integers(0, 40), min_size=1, max_size=15), st.integers(0, 200))
def test_quota_sum_and_caps(sizes, n_v):
    got = allocate_quota(sizes, n_v)
    assert got.sum() == (min(n_v, sum(sizes)) if sum(sizes) else 0)
    assert np.all(got <= np.array(sizes))


# --- representative selection ----------------------------------------------

def test_all_confident_draws_from_confident_subset():
    recs = [record(frame_id=i) for i in range(30)]
    out = select_representatives(recs, 10, 3, seed=0)
    assert len(out) == 10 and all(r.confident for r in out)


def test_balanced_split():
    recs = [record(confident=i < 4, frame_id=i) for i in range(8)]
    out = select_representatives(recs, 4, 15, seed=0)
    assert sum(r.confident for r in out) == 2
    assert sum(not r.confident for r in out) == 2


def test_backfill_from_larger_subset():
    recs = [record(confident=i < 2, frame_id=i) for i in range(20)]
    out = select_representatives(recs, 10, 3, seed=0)
    assert len(out) == 10
    assert sum(r.confident for r in out) == 2


@given(st.integers(0, 60), st.integers(1, 50), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_output_size(n, n_v, seed):
    rng = np.random.default_rng(seed)
    recs = [record(confident=bool(rng.random() < 0.6), weight=rng.random(), frame_id=i) for i in range(n)]
    assert len(select_representatives(recs, n_v, 15, seed=seed)) == min(n_v, n)


def test_top_weight_within_each_cluster():
    rng = np.random.default_rng(6)
    recs = [record(weight=float(rng.random()), frame_id=i, rng=rng) for i in range(60)]
    n_v, k, seed = 12, 4, 3
    out = select_representatives(recs, n_v, k, seed=seed)
    # re-run the same clustering the selector used on the confident subset
    X = pose_vectors(np.stack([r.pred_3d for r in recs]))
    m = spherical_kmeans(X, k, seed=seed)
    chosen = {r.frame_id for r in out}
    for c in range(m.k):
        members = np.flatnonzero(m.assignments == c)
        picked = [i for i in members if i in chosen]
        ranked = sorted(members, key=lambda i: -recs[i].weight)
        assert sorted(picked) == sorted(ranked[:len(picked)])


def test_empty_video():
    assert select_representatives([], 10) == []


def test_non_confident_records_flagged():
    recs = [record(confident=i % 2 == 0, frame_id=i) for i in range(20)]
    out = select_representatives(recs, 10, 3, seed=1)
    assert {r.confident for r in out} == {True, False}
    assert all(r.pred_3d is not None for r in out if r.confident)


def test_ablation_strategies_sizes():
    recs = [record(confident=i % 3 == 0, weight=i / 40, frame_id=i) for i in range(40)]
    for s in ("uniform", "weight", "balanced", "clustered"):
        assert len(select_representatives(recs, 16, 4, seed=0, strategy=s)) == 16
    with pytest.raises(InvalidInputError):
        select_representatives(recs, 4, strategy="nope")


# --- memory bank -----------------------------------------------------------

def test_draw_probabilities_examples():
    bank = MemoryBank([record(frame_id=i) for i in range(4)])
    np.testing.assert_allclose(bank.draw_probabilities(), 0.25)
    bank = MemoryBank([record(), record()])
    bank.records[1].times_chosen = 9
    p = bank.draw_probabilities()
    assert p[0] / p[1] == pytest.approx(10.0)


def test_bank_draw_monte_carlo():
    counts = (0, 1, 3)
    rng = np.random.default_rng(7)
    hits = np.zeros(3)
    trials = 10_000
    for _ in range(trials):
        bank = MemoryBank([record() for _ in counts])
        for r, c in zip(bank.records, counts):
            r.times_chosen = c
        picked = bank_draw(bank, 1, rng)[0]
        hits[bank.records.index(picked)] += 1
    p = np.array([1, 1 / 2, 1 / 4])
    p /= p.sum()
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(hits - trials * p) < 3 * sigma)


def test_bank_draw_without_replacement_and_counts():
    bank = MemoryBank([record(frame_id=i) for i in range(5)])
    rng = np.random.default_rng(8)
    out = bank_draw(bank, 3, rng)
    assert len({id(r) for r in out}) == 3
    assert sum(r.times_chosen for r in bank.records) == 3
    out = bank_draw(bank, 50, rng)
    assert len(out) == 5
    assert bank_draw(MemoryBank(), 3, rng) == []
    with pytest.raises(InvalidInputError):
        bank_draw(bank, 0, rng)


def test_repeated_draws_lower_relative_probability():
    bank = MemoryBank([record(frame_id=i) for i in range(6)])
    rng = np.random.default_rng(9)
    drawn = bank_draw(bank, 2, rng)
    p = bank.draw_probabilities()
    idx = [bank.records.index(r) for r in drawn]
    others = [i for i in range(6) if i not in idx]
    assert p[idx].max() < p[others].min()

import numpy as np
import pytest

from posetta import diffmodel as dm
from posetta.kinematics import InvalidInputError, PoseParams

J = 15
D = 3 * J


def model(seed=0, hidden=(64, 64)):
    return dm.RegressorState.initialize(D, hidden, J, seed=seed)


def test_layer_shapes_chain():
    s = model()
    assert s.dims == (D, 64, 64, 3 * J + 13)
    for (W, b), a, c in zip(s.layers, s.dims[:-1], s.dims[1:]):
        assert W.shape == (a, c) and b.shape == (c,)
    # layer views share memory with the flat vector
    s.layers[0][0][0, 0] = 123.0
    assert s.flat[0] == 123.0


def test_zero_model_output():
    s = dm.RegressorState((D, 64, 64, 3 * J + 13), joint_count=J)
    p = dm.predict(s, np.random.default_rng(0).standard_normal(D))
    assert np.all(p.theta == 0)
    # beta is an offset from one, so the clamp of a zero output is the neutral scale
    assert np.all(p.beta == 1.0)
    assert p.trans[2] == pytest.approx(np.log(2.0))
    assert p.trans[0] == p.trans[1] == 0


def test_beta_clamped_and_depth_positive():
    s = model(1)
    s.flat[...] *= 40
    p = dm.predict(s, np.random.default_rng(1).standard_normal((50, D)))
    assert p.beta.min() >= 0.5 and p.beta.max() <= 2.0
    assert np.all(p.trans[:, 2] > 0)


def test_predict_is_pure_and_checks_dims():
    s = model(2)
    x = np.random.default_rng(2).standard_normal(D)
    a, b = dm.predict(s, x), dm.predict(s, x)
    np.testing.assert_array_equal(a.vector(), b.vector())
    with pytest.raises(InvalidInputError):
        dm.predict(s, np.zeros(D + 1))


def test_adam_step_changes_output():
    s = model(3)
    x = np.random.default_rng(3).standard_normal(D)
    before = dm.predict(s, x).vector()

    def loss(p):
        return float(np.sum(p.theta ** 2)), PoseParams(2 * p.theta, np.zeros_like(p.beta), np.zeros_like(p.trans))

    _, g = dm.loss_gradient(s, x, loss)
    dm.adam_step(s, dm.AdamState.like(s, 1e-3, 0.9), g)
    assert not np.allclose(dm.predict(s, x).vector(), before)


# --- gradients ---------------------------------------------------------------

def test_constant_loss_zero_gradient():
    s = model(4)
    _, g = dm.loss_gradient(s, np.ones(D), lambda p: (3.0, PoseParams(np.zeros_like(p.theta), np.zeros_like(p.beta),
                                                                        np.zeros_like(p.trans))))
    assert np.all(g == 0)


def test_linear_model_closed_form():
    rng = np.random.default_rng(5)
    s = dm.RegressorState((D, 3 * J + 13), rng.standard_normal(D * (3 * J + 13) + 3 * J + 13), J)
    x = rng.standard_normal(D)
    y = rng.standard_normal((J, 3))

    def loss(p):
        r = p.theta - y
        return float(np.sum(r ** 2)), PoseParams(2 * r, np.zeros_like(p.beta), np.zeros_like(p.trans))

    _, g = dm.loss_gradient(s, x, loss)
    W, b = s.layers[0]
    resid = (x @ W + b)[:3 * J] - y.ravel()
    dW, db = s.grad_views(g)[0]
    np.testing.assert_allclose(dW[:, :3 * J], 2 * np.outer(x, resid), atol=1e-10)
    np.testing.assert_allclose(db[:3 * J], 2 * resid, atol=1e-10)
    assert np.all(dW[:, 3 * J:] == 0)


def test_full_model_gradient_finite_differences():
    rng = np.random.default_rng(6)
    s = model(6, hidden=(8, 8))
    X = rng.standard_normal((3, D))
    target = rng.standard_normal((3, J, 3))

    def loss(p):
        r = p.theta - target
        return (float(np.sum(r ** 2) + np.sum(p.beta ** 3) + np.sum(p.trans ** 2)),
                PoseParams(2 * r, 3 * p.beta ** 2, 2 * p.trans))

    _, g = dm.loss_gradient(s, X, loss)
    num = np.empty_like(g)
    for i in range(g.size):
        s2 = s.copy()
        s2.flat[i] += 1e-5
        up = loss(dm.predict(s2, X))[0]
        s2.flat[i] -= 2e-5
        num[i] = (up - loss(dm.predict(s2, X))[0]) / 2e-5
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-6)


def test_non_finite_loss_raises():
    s = model(7)
    with pytest.raises(dm.GradientError):
        dm.loss_gradient(s, np.ones(D), lambda p: (float("nan"), p))


# --- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    s = model(8)
    before = s.flat.copy()
    a = dm.AdamState.like(s, 0.1, 0.9)
    dm.adam_step(s, a, np.zeros_like(s.flat))
    np.testing.assert_array_equal(s.flat, before)
    assert a.step_count == 1


def test_adam_first_step_moves_by_lr():
    s = dm.RegressorState((1, 3 * 12 + 13), np.zeros(3 * 12 + 13 + 3 * 12 + 13), 12)
    a = dm.AdamState.like(s, 0.1, 0.9)
    g = np.zeros_like(s.flat)
    g[0] = 1.0
    dm.adam_step(s, a, g)
    assert s.flat[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_two_steps_match_unrolled_recurrence():
    s = dm.RegressorState((1, 3 * 12 + 13), np.zeros(2 * (3 * 12 + 13)), 12)
    lr, b1, b2, eps = 0.01, 0.5, 0.999, 1e-8
    a = dm.AdamState.like(s, lr, b1)
    g = np.zeros_like(s.flat)
    g[0] = 0.3
    dm.adam_step(s, a, g)
    dm.adam_step(s, a, g)
    m1, v1 = (1 - b1) * 0.3, (1 - b2) * 0.09
    m2, v2 = b1 * m1 + (1 - b1) * 0.3, b2 * v1 + (1 - b2) * 0.09
    assert a.m[0] == pytest.approx(m2) and a.v[0] == pytest.approx(v2)
    p1 = -lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    p2 = p1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert s.flat[0] == pytest.approx(p2, rel=1e-12)


def test_adam_shape_mismatch():
    s = model(9)
    with pytest.raises(InvalidInputError):
        dm.adam_step(s, dm.AdamState.like(s, 0.1, 0.9), np.zeros(3))


# --- teacher ----------------------------------------------------------------------

def test_ema_limits_and_blend():
    s = model(10)
    t = dm.TeacherState.from_student(model(11), ema_decay=1.0)
    before = t.flat.copy()
    dm.ema_update(t, s)
    np.testing.assert_array_equal(t.flat, before)
    t.ema_decay = 0.0
    dm.ema_update(t, s)
    np.testing.assert_array_equal(t.flat, s.flat)

    t = dm.TeacherState(np.array([1.0]), 0.99)
    stu = type("S", (), {"flat": np.array([0.0])})()
    dm.ema_update(t, stu)
    stu.flat = np.array([2.0])
    dm.ema_update(t, stu)
    assert t.flat[0] == pytest.approx(0.99 * 0.99 * 1.0 + 0.01 * 2.0)


# --- snapshots / checkpoints ------------------------------------------------------

def test_snapshot_roundtrip_bytes():
    s = model(12)
    a = dm.AdamState.like(s, 1e-3, 0.5)
    dm.adam_step(s, a, np.random.default_rng(0).standard_normal(s.flat.size))
    snap = dm.snapshot(s, a)
    s2, a2 = dm.restore(snap)
    assert dm.snapshot(s2, a2).tobytes() == snap.tobytes()
    assert dm.snapshot(s2, a2) == snap


def test_restore_erases_later_steps():
    s = model(13)
    a = dm.AdamState.like(s, 1e-3, 0.5)
    snap = dm.snapshot(s, a)
    rng = np.random.default_rng(1)
    for _ in range(10):
        dm.adam_step(s, a, rng.standard_normal(s.flat.size))
    assert dm.snapshot(s, a) != snap
    s, a = dm.restore(snap)
    assert dm.snapshot(s, a) == snap
    assert a.step_count == 0


def test_snapshot_is_isolated_from_later_mutation():
    s = model(14)
    snap = dm.snapshot(s)
    s.flat += 1.0
    assert not np.array_equal(snap.flat, s.flat)
    restored, _ = dm.restore(snap)
    restored.flat += 1.0
    assert dm.snapshot(dm.restore(snap)[0]) == snap


def test_checkpoint_roundtrip(tmp_path):
    s = model(15)
    path = tmp_path / "m.bin"
    dm.save_checkpoint(path, s)
    s2 = dm.load_checkpoint(path)
    assert s2.dims == s.dims
    x = np.random.default_rng(2).standard_normal((4, D))
    np.testing.assert_array_equal(dm.predict(s, x).vector(), dm.predict(s2, x).vector())
    raw = path.read_bytes()
    assert raw[:4] == b"PTTA"
    np.testing.assert_array_equal(np.frombuffer(raw[-8 * s.flat.size:], "<f8"), s.flat)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        dm.load_checkpoint(p)


# --- hidden features ---------------------------------------------------------------

def test_feature_at_layer_identity_first_layer():
    s = dm.RegressorState((D, D, 3 * J + 13), joint_count=J)
    W, b = s.layers[0]
    W[...] = np.eye(D)
    b[...] = np.linspace(-1, 1, D)
    x = np.random.default_rng(3).standard_normal(D)
    np.testing.assert_allclose(dm.feature_at_layer(s, x, 0), np.tanh(x + b))


def test_feature_at_layer_properties():
    s1, s2 = model(16), model(17)
    x = np.random.default_rng(4).standard_normal(D)
    np.testing.assert_array_equal(dm.feature_at_layer(s1, x), dm.feature_at_layer(s1, x))
    a, b = dm.feature_at_layer(s1, x), dm.feature_at_layer(s2, x)
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert cos < 1 - 1e-6
    np.testing.assert_array_equal(dm.feature_at_layer(s1, x, -1), dm.evaluate(s1, x).hidden(-1))
    with pytest.raises(IndexError):
        dm.feature_at_layer(s1, x, 2)

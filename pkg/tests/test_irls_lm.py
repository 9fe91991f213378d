import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pnpnet.errors import ConfigError
from pnpnet.geometry import Pose, Rotation, jacobian, residuals, rotation_distance
from pnpnet.irls_lm import (LMConfig, cholesky_solve, irls_weights, lm_layer, lm_step_batch, refine,
                            refine_batch, softplus, softplus_inv)
from pnpnet.preprocess import ProblemInstance
from pnpnet.synthgen import ScenarioConfig, sample_instance

CLEAN = ScenarioConfig(sigma2d=0.0, sigma3d=0.0, outliers=False)


def perturb(pose, rng, deg=5.0, dist=0.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_axis_angle(axis, np.deg2rad(deg)).matrix() @ pose.rot.matrix()
    dt = rng.normal(size=3)
    return Pose(pose.t + dist * dt / np.linalg.norm(dt), Rotation.from_matrix(R))


def reference_lm_step(pose, inst, alpha, gamma, lam, floor):
    """Independent dense implementation with numpy's solver."""
    r = residuals(pose, inst.intrinsics, inst.corrs)
    J = jacobian(pose, inst.intrinsics, inst.corrs)
    w = np.repeat(np.maximum(np.linalg.norm(r.reshape(-1, 2), axis=1), floor) ** -alpha, 2)
    A = J.T @ (w[:, None] * J)
    delta = np.linalg.solve(A + lam * np.diag(np.diag(A)), -J.T @ (w * r))
    return pose.vector() + gamma * delta


def test_weights_examples():
    r = np.array([2.0, 0.0, 0.0, 0.0, 3.0, 4.0])
    np.testing.assert_array_equal(irls_weights(r, 0.0, 1e-6), [1.0, 1.0, 1.0])
    w = irls_weights(r, 2.0, 1e-6)
    assert w[0] == pytest.approx(0.25)
    assert w[1] == pytest.approx(1e-6 ** -2)
    assert np.isfinite(w).all()
    assert w[2] == pytest.approx(1 / 25)


@given(arrays(np.float64, (6, 2), elements=st.floats(-100, 100)), st.floats(0.01, 3.0),
       st.floats(1e-6, 10.0))
def test_weights_non_increasing_in_residual_norm(r, alpha, floor):
    w = irls_weights(r, alpha, floor)
    norms = np.linalg.norm(r, axis=1)
    order = np.argsort(norms)
    assert np.all(np.diff(w[order]) <= 1e-15 * w.max())
    big = norms > floor
    if big.any() and (~big).any():
        assert w[big].max() < w[~big].min()


def test_layer_at_truth_is_stationary(rng):
    inst = sample_instance(CLEAN, rng)
    out = lm_layer(inst.truth, inst, 1.0, 1.0, 1e-3)
    np.testing.assert_allclose(out.vector(), inst.truth.vector(), atol=1e-10)


def test_layer_decreases_residual_near_truth(rng):
    for _ in range(20):
        inst = sample_instance(CLEAN, rng)
        start = perturb(inst.truth, rng, 1.0, 0.1)
        _, info = lm_layer(start, inst, 0.0, 1.0, 1e-3, full_output=True)
        new = lm_layer(start, inst, 0.0, 1.0, 1e-3)
        _, info_new = lm_layer(new, inst, 0.0, 1.0, 1e-3, full_output=True)
        assert info_new["weighted_sq"] < info["weighted_sq"]


def test_layer_matches_independent_implementation(rng):
    sc = ScenarioConfig()
    for alpha in (0.0, 0.7, 2.0):
        for _ in range(10):
            inst = sample_instance(sc, rng)
            start = perturb(inst.truth, rng)
            got = lm_layer(start, inst, alpha, 0.8, 1e-2, weight_floor=4.0)
            want = reference_lm_step(start, inst, alpha, 0.8, 1e-2, 4.0)
            np.testing.assert_allclose(got.t, want[:3], rtol=1e-9, atol=1e-9)
            assert rotation_distance(got.rot, Rotation(want[3:])) < 1e-9


def test_undamped_unweighted_layer_is_gauss_newton(rng):
    for _ in range(20):
        inst = sample_instance(ScenarioConfig(), rng)
        start = perturb(inst.truth, rng)
        r = residuals(start, inst.intrinsics, inst.corrs)
        J = jacobian(start, inst.intrinsics, inst.corrs)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        got = lm_layer(start, inst, 0.0, 1.0, 0.0).vector() - start.vector()
        if np.linalg.norm(start.omega + delta[3:]) < np.pi:
            np.testing.assert_allclose(got, delta, rtol=1e-8, atol=1e-8 * np.abs(delta).max())


def test_cholesky_solver_against_numpy(rng):
    M = rng.normal(size=(50, 6, 6))
    H = M @ np.swapaxes(M, 1, 2) + 0.1 * np.eye(6)
    g = rng.normal(size=(50, 6))
    x, ok = cholesky_solve(H, g)
    assert ok.all()
    np.testing.assert_allclose(x, np.linalg.solve(H, g[..., None])[..., 0], rtol=1e-9, atol=1e-12)
    _, ok = cholesky_solve(np.zeros((1, 6, 6)), np.ones((1, 6)))
    assert not ok[0]


def test_unsolvable_layer_keeps_pose_and_flags():
    # every point sits on the camera plane: no usable linearisation
    inst = ProblemInstance(CLEAN_INTRINSICS, np.zeros((5, 3)), np.zeros((5, 2)))
    start = Pose.identity()
    out, info = lm_layer(start, inst, 1.0, 1.0, 1e-3, full_output=True)
    assert info["singular"]
    assert out == start
    pose, trace = refine(start, inst, LMConfig.constant(3))
    assert trace.flagged and pose == start


def test_damping_retry_rescues_rank_deficient_system(rng):
    # one correspondence leaves a rank-2 normal matrix; lam = 0 must be raised to solve it
    inst = sample_instance(CLEAN, rng).subset([0])
    t, w, info = lm_step_batch(inst.truth.t[None] + 0.1, inst.truth.omega[None], np.array([inst.f]),
                               inst.a[None], inst.b[None], 0.0, 1.0, 0.0)
    assert np.isfinite(t).all()


def test_refine_applies_exactly_m_layers(rng):
    inst = sample_instance(ScenarioConfig(), rng)
    start = perturb(inst.truth, rng)
    cfg = LMConfig([0.5], [0.7], [1e-3])
    pose, trace = refine(start, inst, cfg)
    assert pose == lm_layer(start, inst, 0.5, 0.7, 1e-3)
    assert len(trace.poses) == len(trace.weighted_sq) == len(trace.weights) == 2
    cfg3 = LMConfig.alpha_ramp(3)
    pose3, trace3 = refine(start, inst, cfg3)
    p = start
    for j in range(3):
        p = lm_layer(p, inst, cfg3.alpha[j], cfg3.gamma[j], cfg3.lam[j])
    assert pose3 == p
    assert len(trace3.poses) == 4


def test_clean_convergence_from_five_degrees():
    ok = 0
    cfg = LMConfig.constant(10, alpha=0.0, gamma=1.0, lam=1e-3)
    for i in range(200):
        rng = np.random.default_rng([5, i])
        inst = sample_instance(CLEAN, rng)
        pose, _ = refine(perturb(inst.truth, rng), inst, cfg)
        ok += (rotation_distance(pose.rot, inst.truth.rot) < 1e-6
               and np.linalg.norm(pose.t - inst.truth.t) < 1e-6)
    assert ok >= 198


def test_monotone_descent_on_clean_data():
    cfg = LMConfig.constant(10, alpha=0.0, gamma=1.0, lam=1e-3)
    B = 1000
    rng = np.random.default_rng(9)
    insts = [sample_instance(CLEAN, rng) for _ in range(B)]
    starts = [perturb(i.truth, rng) for i in insts]
    _, _, _, rec = refine_batch(np.array([s.t for s in starts]), np.array([s.omega for s in starts]),
                                np.array([i.f for i in insts]), np.array([i.a for i in insts]),
                                np.array([i.b for i in insts]), cfg.alpha, cfg.gamma, cfg.lam,
                                cfg.weight_floor, trace=True)
    sq = np.array(rec["sq"])   # [m + 1, B]
    # non-increasing up to round-off once converged
    mono = np.all(np.diff(sq, axis=0) <= 1e-9 * (1 + sq[:-1]), axis=0)
    assert mono.mean() >= 0.99


@pytest.mark.parametrize("bad", [dict(alpha=[-1.0]), dict(gamma=[0.0]), dict(lam=[-1e-3])])
def test_config_validation(bad):
    kw = dict(alpha=[1.0], gamma=[0.5], lam=[1e-3])
    kw.update(bad)
    with pytest.raises(ConfigError):
        LMConfig(**kw)
    with pytest.raises(ConfigError):
        LMConfig([], [], [])


@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_reparameterisation_round_trip_and_positivity(raw):
    cfg = LMConfig.from_unconstrained(raw)
    assert (cfg.alpha > 0).all() and (cfg.gamma > 0).all() and (cfg.lam > 0).all()
    np.testing.assert_allclose(LMConfig.from_unconstrained(cfg.unconstrained()).alpha, cfg.alpha,
                               rtol=1e-9)
    np.testing.assert_allclose(softplus_inv(softplus(raw)), raw, atol=1e-7)


from pnpnet.geometry import CameraIntrinsics  # noqa: E402

CLEAN_INTRINSICS = CameraIntrinsics(800.0)

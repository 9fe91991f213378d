import numpy as np
import pytest
from hypothesis import given, strategies as st

from pnpnet.errors import ShapeMismatch
from pnpnet.geometry import CameraIntrinsics, rotation_distance
from pnpnet.mlp import (CoarsePose, architecture, backward_batch, coarse_to_omega,
                        coarse_to_omega_grad, coarse_to_pose, encode_batch, forward_batch,
                        init_params, net_backward, net_forward)
from pnpnet.preprocess import ProblemInstance, preprocess
from pnpnet.synthgen import ScenarioConfig, sample_batch, sample_instance


def instance(rng, n):
    return ProblemInstance(CameraIntrinsics(800.0), rng.uniform(-10, 10, (n, 3)),
                           rng.uniform(-400, 400, (n, 2)))


def perturbed_params(seed, n):
    """He-initialised weights with non-zero biases so every code path is exercised."""
    p = init_params(seed, n)
    rng = np.random.default_rng(seed + 1000)
    arrays = [x + (rng.normal(0, 0.1, x.shape) if x.ndim == 1 else 0) for x in p.arrays()]
    return p.with_arrays(arrays)


def test_layer_sizes_for_nine():
    p = init_params(0, 9)
    sizes = p.layer_sizes()
    assert sizes["trunk"] == [180, 45, 27]
    assert sizes["head_rot"] == [18] * 5 + [4]
    assert sizes["head_trans"] == [18] * 5 + [3]
    assert architecture(9)["trunk"] == [180, 45, 27]
    assert p.trunk[0][0].shape == (180, 45)


def test_init_is_seeded_and_fan_in_scaled():
    a, b = init_params(3, 9), init_params(3, 9)
    assert a == b
    assert not (a == init_params(4, 9))
    for W, bias in a.layers():
        assert np.all(np.abs(W) <= np.sqrt(6.0 / W.shape[1]))
        assert not bias.any()


def test_zero_network_outputs_zero(rng):
    p = init_params(0, 5)
    p = p.with_arrays([np.zeros_like(x) for x in p.arrays()])
    assert np.array_equal(net_forward(p, instance(rng, 5)).vector(), np.zeros(7))


def test_forward_is_deterministic(rng):
    p, inst = init_params(0, 9), instance(rng, 9)
    assert np.array_equal(net_forward(p, inst).vector(), net_forward(p, inst).vector())


def test_wrong_n_rejected(rng):
    with pytest.raises(ShapeMismatch):
        net_forward(init_params(0, 9), instance(rng, 8))
    with pytest.raises(ShapeMismatch):
        net_backward(init_params(0, 9), instance(rng, 8), np.ones(7))


def test_backward_matches_finite_differences_on_small_net():
    h = 1e-5
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        p = perturbed_params(trial, 4)
        inst = instance(rng, 4)
        up = rng.normal(size=7)
        grads = net_backward(p, inst, up)
        arrays = p.arrays()
        for k, (arr, g) in enumerate(zip(arrays, grads)):
            flat_idx = rng.choice(arr.size, size=min(arr.size, 12), replace=False)
            for j in flat_idx:
                idx = np.unravel_index(j, arr.shape)
                vals = []
                for sgn in (1, -1):
                    mod = [x.copy() for x in arrays]
                    mod[k][idx] += sgn * h
                    vals.append(up @ net_forward(p.with_arrays(mod), inst).vector())
                fd = (vals[0] - vals[1]) / (2 * h)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    assert worst < 1e-3


def test_zero_upstream_gives_zero_gradients(rng):
    grads = net_backward(init_params(1, 4), instance(rng, 4), np.zeros(7))
    assert all(not g.any() for g in grads)


def test_dead_unit_gets_no_gradient(rng):
    p = init_params(2, 4)
    arrays = p.arrays()
    arrays[1] = arrays[1].copy()
    arrays[1][0] = -1e6   # first trunk unit never fires
    p = p.with_arrays(arrays)
    X = encode_batch(rng.uniform(-10, 10, (8, 4, 3)), rng.uniform(-400, 400, (8, 4, 2)))
    out, cache = forward_batch(p, X)
    grads = backward_batch(p, cache, rng.normal(size=(8, 7)))
    assert not grads[0][0].any()
    assert grads[1][0] == 0.0


def test_batched_backward_sums_single_gradients(rng):
    p = perturbed_params(5, 4)
    insts = [instance(rng, 4) for _ in range(3)]
    ups = rng.normal(size=(3, 7))
    X = encode_batch(np.array([i.a for i in insts]), np.array([i.b for i in insts]))
    _, cache = forward_batch(p, X)
    batch = backward_batch(p, cache, ups)
    singles = [net_backward(p, i, u) for i, u in zip(insts, ups)]
    for k, g in enumerate(batch):
        np.testing.assert_allclose(g, sum(s[k] for s in singles), rtol=1e-10, atol=1e-12)


def test_coarse_to_pose_examples():
    pose = coarse_to_pose(CoarsePose(np.zeros(3), np.array([0, 0, 2.0]), np.pi / 2))
    np.testing.assert_allclose(pose.omega, [0, 0, np.pi / 2])
    assert np.array_equal(coarse_to_pose(CoarsePose(np.ones(3), np.zeros(3), 1.0)).omega, np.zeros(3))
    assert np.array_equal(coarse_to_pose(CoarsePose(np.ones(3), np.ones(3), -0.3)).omega, np.zeros(3))


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.floats(0.05, 3.0))
def test_coarse_to_omega_grad_matches_finite_differences(s, theta):
    v = np.array([0.0, 0, 0] + list(s[:3]) + [theta])
    if np.linalg.norm(v[3:6]) < 0.1:
        return
    G = coarse_to_omega_grad(v)
    h = 1e-6
    for k in range(4):
        e = np.zeros(7)
        e[3 + k] = h
        fd = (coarse_to_omega(v + e) - coarse_to_omega(v - e)) / (2 * h)
        np.testing.assert_allclose(G[:, k], fd, atol=1e-6)


def test_pipeline_output_ignores_input_order(rng):
    p = init_params(0, 9)
    inst = sample_instance(ScenarioConfig(), rng)
    ref = net_forward(p, preprocess(inst)).vector()
    for _ in range(10):
        perm = rng.permutation(9)
        assert np.array_equal(net_forward(p, preprocess(inst.subset(perm))).vector(), ref)


def test_output_has_seven_entries(rng):
    out, _ = forward_batch(init_params(0, 9), rng.normal(size=(3, 45)))
    assert out.shape == (3, 7)


@pytest.mark.slow
def test_trained_network_is_a_usable_initialiser(desk_model):
    params, _, _ = desk_model
    sc = ScenarioConfig(sigma2d=0.0, sigma3d=0.0, outliers=False)
    insts = [sample_instance(sc, np.random.default_rng([77, i])) for i in range(1000)]
    good = 0
    for inst in insts:
        pose = coarse_to_pose(net_forward(params, preprocess(inst)))
        er = rotation_distance(pose.rot, inst.truth.rot)
        et = np.linalg.norm(pose.t - inst.truth.t)
        good += (er < np.deg2rad(20)) and (et < 5)
    rate = good / len(insts)
    print(f"net alone within 20 deg / 5 units: {rate:.3f}")
    assert rate >= 0.8

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnpnet.errors import ConfigError
from pnpnet.geometry import CameraIntrinsics, project_all, rodrigues
from pnpnet.synthgen import (ScenarioConfig, add_noise, inject_outliers, instance_stream, sample_batch,
                             sample_clean_instance, sample_instance)


def ks_uniform(x, lo, hi):
    """Kolmogorov-Smirnov statistic against U(lo, hi)."""
    x = np.sort((np.asarray(x) - lo) / (hi - lo))
    n = len(x)
    i = np.arange(1, n + 1)
    return max(np.max(i / n - x), np.max(x - (i - 1) / n))


@pytest.fixture(scope="module")
def big_batch():
    return sample_batch(ScenarioConfig(), np.random.default_rng(77), 20000)


def test_translation_uniform_in_box(big_batch):
    t = big_batch["t"]
    assert np.abs(t).max() <= 12.5
    for k in range(3):
        # 1.63 / sqrt(n) is the 1% critical value
        assert ks_uniform(t[:, k], -12.5, 12.5) < 1.63 / np.sqrt(len(t))


def test_rotation_axis_isotropic_and_angle_uniform(big_batch):
    w = big_batch["omega"]
    theta = np.linalg.norm(w, axis=1)
    axis = w / theta[:, None]
    assert np.abs(axis.mean(axis=0)).max() < 0.02
    np.testing.assert_allclose(axis.T @ axis / len(axis), np.eye(3) / 3, atol=0.02)
    assert theta.max() <= np.pi / 2
    assert ks_uniform(theta, 0, np.pi / 2) < 1.63 / np.sqrt(len(theta))


def test_points_in_front_and_inside_image(big_batch):
    R = rodrigues(big_batch["omega"])
    p = np.einsum("bij,bnj->bni", R, big_batch["a"]) + big_batch["t"][:, None]
    # world points carry 3D noise, so depth stays positive only up to it
    assert p[..., 2].min() > 0.5
    assert np.abs(big_batch["b_exact"]).max() <= 400.0


def test_noise_levels():
    sc = ScenarioConfig(outliers=False)
    rng = np.random.default_rng(2)
    batch = sample_batch(sc, rng, 4000)
    d2 = batch["b"] - batch["b_exact"]
    assert abs(d2.std() - 1.0) < 0.05
    assert abs(d2.mean()) < 0.02
    var = ScenarioConfig(outliers=False, sigma2d=4.0, noise_is_variance=True)
    d2 = (lambda bt: bt["b"] - bt["b_exact"])(sample_batch(var, rng, 4000))
    assert abs(d2.std() - 2.0) < 0.1


def test_world_noise_level():
    sc = ScenarioConfig(outliers=False, sigma2d=0.0)
    rng = np.random.default_rng(3)
    inst = sample_clean_instance(sc, rng)
    noisy = [add_noise(inst, sc, rng).a - inst.a for _ in range(2000)]
    assert abs(np.std(noisy) - 0.05) < 0.0025


def test_outlier_counts_range_and_mask(big_batch):
    counts = big_batch["mask"].sum(axis=1)
    assert set(np.unique(counts)) == {0, 1, 2, 3}
    freq = np.bincount(counts) / len(counts)
    np.testing.assert_allclose(freq, 0.25, atol=0.02)
    clean = ~big_batch["mask"]
    d = np.linalg.norm(big_batch["b"] - big_batch["b_exact"], axis=-1)
    assert d[clean].max() < 8.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_mismatch_types(seed, count):
    rng = np.random.default_rng(seed)
    sc = ScenarioConfig(sigma2d=0.0, sigma3d=0.0, outliers=False)
    inst = sample_clean_instance(sc, rng)
    out = inject_outliers(inst, rng, sc, count)
    idx = np.flatnonzero(out.outlier_mask)
    assert len(idx) == count
    np.testing.assert_array_equal(out.b[~out.outlier_mask], inst.b[~out.outlier_mask])
    copies = 0
    for i in idx:
        assert not np.array_equal(out.b[i], inst.b[i])
        others = np.delete(inst.b, i, axis=0)
        copies += np.any(np.all(others == out.b[i], axis=1))
        assert np.abs(out.b[i]).max() <= 400
    # types alternate from a random start
    assert copies in (count // 2, (count + 1) // 2)


def test_exact_projection_consistency():
    sc = ScenarioConfig(sigma2d=0.0, sigma3d=0.0, outliers=False)
    inst = sample_instance(sc, np.random.default_rng(5))
    np.testing.assert_allclose(project_all(inst.truth, CameraIntrinsics(800.0), inst.a), inst.b,
                               atol=1e-9)


def test_reproducible_from_seed():
    a = instance_stream(ScenarioConfig(), 5, seed=11)
    b = instance_stream(ScenarioConfig(), 5, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.a, y.a)
        np.testing.assert_array_equal(x.b, y.b)
    c = instance_stream(ScenarioConfig(), 1, seed=12)[0]
    assert not np.array_equal(a[0].a, c.a)


def test_gaussian_prior_spread():
    batch = sample_batch(ScenarioConfig(pose_prior="gaussian"), np.random.default_rng(4), 4000)
    # rejection of off-image draws trims the tails, so only a loose bound applies
    assert 8.0 < batch["t"].std() < 30.0


@pytest.mark.parametrize("kw", [dict(n=3), dict(pose_prior="cauchy"), dict(sigma2d=-1),
                                dict(outlier_count=10), dict(depth_min=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)

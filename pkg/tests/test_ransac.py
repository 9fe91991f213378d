import numpy as np
import pytest
from hypothesis import given, strategies as st

from pnpnet.epnp import epnp_lm
from pnpnet.errors import ConfigError, InsufficientPoints
from pnpnet.geometry import rotation_distance
from pnpnet.irls_lm import LMConfig
from pnpnet.ransac import RansacConfig, ransac_solve, required_iterations, sample_subsets
from pnpnet.synthgen import ScenarioConfig, sample_instance

LM = LMConfig.constant()


def test_same_seed_same_pose(rng):
    inst = sample_instance(ScenarioConfig(outlier_count=2), rng)
    p1 = ransac_solve(inst, RansacConfig(seed=4), LM)
    p2 = ransac_solve(inst, RansacConfig(seed=4), LM)
    assert p1 == p2


def test_best_hypothesis_has_the_most_inliers(rng):
    for _ in range(5):
        inst = sample_instance(ScenarioConfig(outlier_count=3), rng)
        _, info = ransac_solve(inst, RansacConfig(), LM, rng=np.random.default_rng(1), full_output=True)
        assert info["best_count"] == max(info["counts"])
        assert info["inliers"].sum() == info["best_count"]


def test_mismatches_are_excluded_from_inliers():
    rng = np.random.default_rng(21)
    hits = 0
    for _ in range(20):
        inst = sample_instance(ScenarioConfig(sigma2d=0.5, sigma3d=0.0, outlier_count=2), rng)
        _, info = ransac_solve(inst, RansacConfig(), LM, rng=rng, full_output=True)
        hits += not np.any(info["inliers"] & inst.outlier_mask)
    assert hits >= 18


def test_without_outliers_matches_epnp_lm(rng):
    sc = ScenarioConfig(outliers=False, sigma2d=0.1, sigma3d=0.0)
    for _ in range(5):
        inst = sample_instance(sc, rng)
        pr = ransac_solve(inst, RansacConfig(), LM, rng=rng)
        pe = epnp_lm(inst, LM)
        assert rotation_distance(pr.rot, pe.rot) < 1e-6
        assert np.linalg.norm(pr.t - pe.t) < 1e-5


def test_too_few_points(rng):
    inst = sample_instance(ScenarioConfig(n=6), rng)
    with pytest.raises(InsufficientPoints):
        ransac_solve(inst, RansacConfig(), LM)


def test_adaptive_stop_on_clean_data(rng):
    inst = sample_instance(ScenarioConfig(outliers=False, sigma2d=0.0, sigma3d=0.0), rng)
    _, info = ransac_solve(inst, RansacConfig(), LM, rng=rng, full_output=True)
    assert info["iterations"] == 1


def test_required_iterations_examples():
    assert required_iterations(1.0, 7, 0.99, 200) == 1
    assert required_iterations(0.0, 7, 0.99, 200) == 200
    # (7/9)^7 = 0.1722..., log(0.01)/log(1 - that) = 24.4
    assert required_iterations(7 / 9, 7, 0.99, 200) == 25
    assert required_iterations(0.3, 7, 0.99, 200) == 200


@given(st.floats(0.01, 0.99), st.floats(0.5, 0.999))
def test_required_iterations_monotone(ratio, conf):
    lo = required_iterations(ratio, 7, conf, 10**6)
    hi = required_iterations(min(ratio + 0.01, 1.0), 7, conf, 10**6)
    assert hi <= lo


def test_subsets_are_distinct_indices():
    s = sample_subsets(np.random.default_rng(0), 9, 7, 50)
    assert s.shape == (50, 7)
    assert all(len(set(row)) == 7 for row in s)
    assert s.min() >= 0 and s.max() < 9


@pytest.mark.parametrize("kw", [dict(subset_size=3), dict(confidence=1.0), dict(inlier_threshold=0),
                                dict(max_iterations=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        RansacConfig(**kw)

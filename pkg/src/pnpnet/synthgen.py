"""Synthetic PnP instances with noise and mismatched correspondences.

Points are drawn inside a box in the camera frame (so every point has positive
depth) and mapped to world coordinates through the inverse of a random pose.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ResampleLimitExceeded
from .geometry import CameraIntrinsics, Pose, Rotation, rodrigues
from .preprocess import F_CONST, ProblemInstance

MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 9
    pose_prior: str = "uniform"          # "uniform" | "gaussian"
    t_box_halfwidth: float = 12.5
    theta_max: float = np.pi / 2
    point_box: tuple = (20.0, 20.0, 80.0)
    depth_min: float = 1.0
    sigma3d: float = 0.05
    sigma2d: float = 1.0
    noise_is_variance: bool = False
    outliers: bool = True
    outlier_count: Optional[int] = None  # fixed count; None draws from {0..n//3}
    outlier_count_max: Optional[int] = None
    gaussian_sigma: float = 25.0
    focal: float = F_CONST
    image_halfwidth: float = 400.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError("scenarios need n >= 4")
        if self.pose_prior not in ("uniform", "gaussian"):
            raise ConfigError(f"unknown pose prior {self.pose_prior!r}")
        if self.sigma3d < 0 or self.sigma2d < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.max_outliers > self.n:
            raise ConfigError("outlier count exceeds n")
        if not (self.focal > 0 and self.image_halfwidth > 0):
            raise ConfigError("focal length and image size must be positive")
        if not 0 < self.depth_min < self.point_box[2]:
            raise ConfigError("depth_min must lie inside the point box")
        object.__setattr__(self, "point_box", tuple(float(v) for v in self.point_box))

    @property
    def max_outliers(self):
        if self.outlier_count is not None:
            return self.outlier_count
        return self.n // 3 if self.outlier_count_max is None else self.outlier_count_max

    @property
    def std3d(self):
        return np.sqrt(self.sigma3d) if self.noise_is_variance else self.sigma3d

    @property
    def std2d(self):
        return np.sqrt(self.sigma2d) if self.noise_is_variance else self.sigma2d

    def to_dict(self):
        return asdict(self)


def random_unit_vectors(rng, size):
    v = rng.standard_normal((size, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_pose_arrays(cfg, rng, count):
    if cfg.pose_prior == "gaussian":
        t = rng.normal(0.0, cfg.gaussian_sigma, (count, 3))
    else:
        h = cfg.t_box_halfwidth
        t = rng.uniform(-h, h, (count, 3))
    s = random_unit_vectors(rng, count)
    theta = rng.uniform(0.0, cfg.theta_max, count)
    return t, theta[:, None] * s


def sample_pose(cfg, rng):
    """Translation from the configured prior; isotropic axis; angle uniform in [0, theta_max]."""
    t, omega = _sample_pose_arrays(cfg, rng, 1)
    return Pose(t[0], Rotation(omega[0]))


def _camera_points(cfg, rng, count):
    wx, wy, depth = cfg.point_box
    x = rng.uniform(-wx / 2, wx / 2, (count, cfg.n))
    y = rng.uniform(-wy / 2, wy / 2, (count, cfg.n))
    z = rng.uniform(cfg.depth_min, depth, (count, cfg.n))
    return np.stack([x, y, z], axis=-1)


def sample_clean_arrays(cfg, rng, count):
    """Noise-free arrays ``(a, b, t, omega)`` for ``count`` instances.

    Draws whose exact projections leave the image are redrawn (pose and points);
    ``ResampleLimitExceeded`` after ``MAX_REJECTIONS`` consecutive failed rounds.
    """
    h = cfg.image_halfwidth
    a = np.empty((count, cfg.n, 3))
    b = np.empty((count, cfg.n, 2))
    t = np.empty((count, 3))
    omega = np.empty((count, 3))
    todo = np.arange(count)
    for _ in range(MAX_REJECTIONS):
        k = len(todo)
        tt, ww = _sample_pose_arrays(cfg, rng, k)
        p = _camera_points(cfg, rng, k)
        bb = cfg.focal * p[..., :2] / p[..., 2:3]
        good = np.all(np.abs(bb) <= h, axis=(-2, -1))
        R = rodrigues(ww)
        aa = np.einsum("kji,knj->kni", R, p - tt[:, None, :])  # R^T (p - t)
        idx = todo[good]
        a[idx], b[idx], t[idx], omega[idx] = aa[good], bb[good], tt[good], ww[good]
        todo = todo[~good]
        if todo.size == 0:
            return a, b, t, omega
    raise ResampleLimitExceeded(f"no valid instance after {MAX_REJECTIONS} draws")


def _outlier_arrays(b, rng, cfg, counts):
    """Mismatch injection on ``b [B, n, 2]`` with per-instance outlier ``counts``."""
    B, n, _ = b.shape
    b_out = b.copy()
    mask = np.zeros((B, n), dtype=bool)
    h = cfg.image_halfwidth
    for k in range(B):
        count = int(counts[k])
        if count == 0:
            continue
        slots = rng.permutation(n)[:count]
        first = int(rng.integers(0, 2))
        kinds = (np.arange(count) + first) % 2  # 0 = wrong match, 1 = wrong sense
        match_slots = slots[kinds == 0]
        sense_slots = slots[kinds == 1]
        if len(match_slots) >= 2:
            # cyclic shift of a random order: a derangement among the wrong-match slots
            order = rng.permutation(match_slots)
            b_out[k, order] = b[k, np.roll(order, 1)]
        elif len(match_slots) == 1:
            i = match_slots[0]
            j = int(rng.integers(0, n - 1))
            b_out[k, i] = b[k, j + (j >= i)]
        b_out[k, sense_slots] = rng.uniform(-h, h, (len(sense_slots), 2))
        mask[k, slots] = True
    return b_out, mask


def _draw_counts(cfg, rng, count, outlier_count):
    if outlier_count is not None:
        return np.full(count, outlier_count)
    if cfg.outlier_count is not None:
        return np.full(count, cfg.outlier_count)
    if not cfg.outliers:
        return np.zeros(count, dtype=int)
    return rng.integers(0, cfg.max_outliers + 1, count)


def sample_batch(cfg, rng, count, outlier_count=None):
    """Vectorised instance generation; returns a dict of arrays.

    Keys: ``a [B, n, 3]``, ``b [B, n, 2]``, ``f [B]``, ``t [B, 3]``,
    ``omega [B, 3]``, ``mask [B, n]``, ``b_exact [B, n, 2]``. Noise is added
    before the mismatches are injected.
    """
    a, b, t, omega = sample_clean_arrays(cfg, rng, count)
    b_exact = b
    a = a + rng.normal(0.0, 1.0, a.shape) * cfg.std3d
    b = b + rng.normal(0.0, 1.0, b.shape) * cfg.std2d
    counts = _draw_counts(cfg, rng, count, outlier_count)
    b, mask = _outlier_arrays(b, rng, cfg, counts)
    return {"a": a, "b": b, "f": np.full(count, float(cfg.focal)), "t": t, "omega": omega,
            "mask": mask, "b_exact": b_exact}


def batch_to_instances(batch):
    return [ProblemInstance(CameraIntrinsics(f), a, b, truth=Pose(t, Rotation(w)), outlier_mask=m)
            for a, b, f, t, w, m in zip(batch["a"], batch["b"], batch["f"], batch["t"],
                                        batch["omega"], batch["mask"])]


def sample_clean_instance(cfg, rng):
    """Noise-free instance (truth recorded, no outliers)."""
    a, b, t, omega = sample_clean_arrays(cfg, rng, 1)
    return ProblemInstance(CameraIntrinsics(cfg.focal), a[0], b[0], truth=Pose(t[0], Rotation(omega[0])),
                           outlier_mask=np.zeros(cfg.n, dtype=bool))


def add_noise(inst, cfg, rng):
    a = inst.a + rng.normal(0.0, 1.0, inst.a.shape) * cfg.std3d
    b = inst.b + rng.normal(0.0, 1.0, inst.b.shape) * cfg.std2d
    return replace(inst, a=a, b=b)


def inject_outliers(inst, rng, cfg, count=None):
    """Replace the image points of ``count`` correspondences by mismatches.

    ``count`` defaults to ``cfg.outlier_count`` or a uniform draw from
    ``{0, ..., max}``. Outlier slots alternate between wrong matching (the image
    point of another correspondence) and wrong sensing (a uniform point in the
    image), starting with a random type.
    """
    if count is None:
        count = cfg.outlier_count if cfg.outlier_count is not None else int(
            rng.integers(0, cfg.max_outliers + 1))
    if count == 0:
        return inst
    b, mask = _outlier_arrays(inst.b[None], rng, cfg, [count])
    if inst.outlier_mask is not None:
        mask = mask | inst.outlier_mask
    return replace(inst, b=b[0], outlier_mask=mask[0])


def sample_instance(cfg, rng, outlier_count=None):
    """One noisy instance, with outliers according to ``cfg``."""
    return batch_to_instances(sample_batch(cfg, rng, 1, outlier_count))[0]


def instance_stream(cfg, count, seed=None, outlier_count=None):
    """``count`` instances drawn one at a time from a generator seeded by ``seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return [sample_instance(cfg, rng, outlier_count) for _ in range(count)]

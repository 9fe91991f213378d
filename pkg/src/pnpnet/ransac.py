"""RANSAC over EPnP-LM hypotheses fitted on random subsets."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .epnp import epnp_lm_batch
from .errors import ConfigError, InsufficientPoints
from .geometry import Pose, Rotation, reprojection

CHUNK = 32


@dataclass(frozen=True)
class RansacConfig:
    subset_size: int = 7
    max_iterations: int = 200
    inlier_threshold: float = 3.0
    confidence: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.subset_size < 4:
            raise ConfigError("subset_size must be at least 4")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        if not self.inlier_threshold > 0:
            raise ConfigError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")

    def to_dict(self):
        return asdict(self)


def required_iterations(inlier_ratio, subset_size, confidence, cap):
    """Iterations needed to draw one all-inlier subset with probability ``confidence``."""
    p_good = inlier_ratio ** subset_size
    if p_good >= 1.0:
        return 1
    if p_good <= 0.0:
        return cap
    k = np.log(1.0 - confidence) / np.log(1.0 - p_good)
    return int(min(cap, max(1, np.ceil(k))))


def sample_subsets(rng, n, size, count):
    """``count`` subsets of ``size`` distinct indices, drawn up front."""
    return np.array([rng.choice(n, size=size, replace=False) for _ in range(count)])


def _score(t, omega, inst, threshold):
    K = len(t)
    r, _, z = reprojection(t, omega, np.full(K, inst.f), np.broadcast_to(inst.a, (K,) + inst.a.shape),
                           np.broadcast_to(inst.b, (K,) + inst.b.shape), jac=False)
    err = np.linalg.norm(r, axis=-1)
    inl = (err <= threshold) & (z > 0)
    total = np.sum(np.where(inl, err, 0.0), axis=-1)
    return inl, total


def ransac_solve(inst, cfg, lm_cfg, rng=None, full_output=False):
    """Best EPnP-LM hypothesis by inlier count, refitted on its inliers.

    Ties in inlier count are broken by the lower summed inlier reprojection error.
    The adaptive stopping rule is replayed over hypotheses in sampling order, so
    the result does not depend on how many are evaluated per chunk. If no subset
    yields a finite pose the identity pose is returned with ``flagged`` set.
    """
    n = inst.n
    if n < cfg.subset_size:
        raise InsufficientPoints(f"need {cfg.subset_size} correspondences, got {n}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    subsets = sample_subsets(rng, n, cfg.subset_size, cfg.max_iterations)

    best = None  # (count, total, t, omega, inlier mask)
    counts = []
    needed = cfg.max_iterations
    done = 0
    while done < needed:
        chunk = subsets[done:min(done + CHUNK, cfg.max_iterations)]
        K = len(chunk)
        t, w, ok = epnp_lm_batch(inst.a[chunk], inst.b[chunk], np.full(K, inst.f), lm_cfg)
        t = np.where(ok[:, None], t, 0.0)
        w = np.where(ok[:, None], w, 0.0)
        inl, total = _score(t, w, inst, cfg.inlier_threshold)
        for k in range(K):
            if done >= needed:
                break
            done += 1
            if not ok[k]:
                continue
            count = int(inl[k].sum())
            counts.append(count)
            if best is None or count > best[0] or (count == best[0] and total[k] < best[1]):
                best = (count, total[k], t[k], w[k], inl[k])
                needed = required_iterations(count / n, cfg.subset_size, cfg.confidence,
                                             cfg.max_iterations)
    info = {"iterations": done, "flagged": best is None, "inliers": None, "counts": counts,
            "best_count": None if best is None else best[0]}
    if best is None:
        pose = Pose.identity()
        return (pose, info) if full_output else pose

    count, _, t, w, mask = best
    if count >= 4:
        idx = np.flatnonzero(mask)
        tr, wr, okr = epnp_lm_batch(inst.a[idx][None], inst.b[idx][None], np.array([inst.f]), lm_cfg)
        if okr[0]:
            t, w = tr[0], wr[0]
    info["inliers"] = mask
    pose = Pose(t, Rotation(w))
    return (pose, info) if full_output else pose

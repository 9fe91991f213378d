"""Unfolded iteratively reweighted Levenberg-Marquardt refinement.

Every layer linearises the reprojection residuals at the current pose, weights
correspondence ``i`` by ``1 / max(|r_i|, floor)^alpha`` and solves

    (J^T W J + lam * diag(J^T W J)) delta = -J^T W r

then moves ``pose <- pose + gamma * delta`` in ``(t, omega)`` coordinates. The
number of layers is fixed: there is no early exit, so the cost of ``refine``
depends on ``(n, m)`` only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ConfigError
from .geometry import DEPTH_EPS, Pose, Rotation, canonical_omega, reprojection

WEIGHT_FLOOR = 4.0
DEFAULT_LAYERS = 10
MAX_DAMPING_RETRIES = 3


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


@dataclass(frozen=True, eq=False)
class LMConfig:
    """Per-layer hyperparameters of the unfolded refiner."""

    alpha: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    weight_floor: float = WEIGHT_FLOOR

    def __post_init__(self):
        arrs = [np.array(v, dtype=float).reshape(-1) for v in (self.alpha, self.gamma, self.lam)]
        m = max(len(v) for v in arrs)
        arrs = [np.broadcast_to(v, (m,)).copy() if len(v) == 1 else v for v in arrs]
        if len({len(v) for v in arrs}) != 1:
            raise ConfigError("alpha, gamma and lam need one value per layer")
        alpha, gamma, lam = arrs
        if m < 1:
            raise ConfigError("the refiner needs at least one layer")
        if not all(np.all(np.isfinite(v)) for v in arrs):
            raise ConfigError("LM hyperparameters must be finite")
        if np.any(alpha < 0) or np.any(gamma <= 0) or np.any(lam < 0):
            raise ConfigError("need alpha >= 0, gamma > 0, lam >= 0")
        if not self.weight_floor > 0:
            raise ConfigError("weight_floor must be positive")
        for name, v in zip(("alpha", "gamma", "lam"), arrs):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def m(self):
        return len(self.alpha)

    @classmethod
    def constant(cls, m=DEFAULT_LAYERS, alpha=1.0, gamma=0.5, lam=1e-3, weight_floor=WEIGHT_FLOOR):
        return cls(np.full(m, alpha), np.full(m, gamma), np.full(m, lam), weight_floor)

    @classmethod
    def alpha_ramp(cls, m=DEFAULT_LAYERS, start=0.0, stop=2.0, gamma=1.0, lam=1e-3,
                   weight_floor=WEIGHT_FLOOR):
        """Robustness exponent increasing linearly from ``start`` to ``stop``."""
        return cls(np.linspace(start, stop, m), np.full(m, gamma), np.full(m, lam), weight_floor)

    def unconstrained(self):
        """``[3, m]`` array of softplus pre-images (the trainable form)."""
        # alpha may be exactly 0, which has no finite pre-image
        alpha = np.maximum(self.alpha, 1e-12)
        return np.stack([softplus_inv(alpha), softplus_inv(self.gamma), softplus_inv(np.maximum(self.lam, 1e-12))])

    @classmethod
    def from_unconstrained(cls, raw, weight_floor=WEIGHT_FLOOR):
        raw = np.asarray(raw, dtype=float)
        return cls(softplus(raw[0]), softplus(raw[1]), softplus(raw[2]), weight_floor)

    def __eq__(self, other):
        return (isinstance(other, LMConfig) and self.weight_floor == other.weight_floor
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("alpha", "gamma", "lam")))

    def __repr__(self):
        return (f"LMConfig(m={self.m}, alpha={self.alpha.tolist()}, gamma={self.gamma.tolist()}, "
                f"lam={self.lam.tolist()}, weight_floor={self.weight_floor})")


@dataclass
class LMTrace:
    """Intermediate states of one ``refine`` call (``m + 1`` entries each)."""

    poses: List[Pose] = field(default_factory=list)
    weighted_sq: List[float] = field(default_factory=list)
    sq: List[float] = field(default_factory=list)
    weights: List[np.ndarray] = field(default_factory=list)
    singular: List[bool] = field(default_factory=list)

    @property
    def flagged(self):
        return any(self.singular)


def irls_weights(r, alpha, weight_floor=WEIGHT_FLOOR):
    """Per-correspondence weights ``1 / max(|r_i|, floor)^alpha``.

    ``r`` is the stacked ``2n`` residual vector (or ``[..., n, 2]``); both rows of a
    correspondence share one weight.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim == 1:
        r = r.reshape(-1, 2)
    norms = np.linalg.norm(r, axis=-1)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim:
        alpha = alpha[..., None]
    return np.maximum(norms, weight_floor) ** (-alpha)


def cholesky_solve(H, g):
    """Solve ``H x = g`` for a batch of small SPD systems.

    Returns ``(x, ok)``; ``ok`` is False where a pivot is not positive relative to
    its diagonal entry (the system is treated as singular).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    k = H.shape[-1]
    L = np.zeros_like(H)
    ok = np.ones(H.shape[:-2], dtype=bool)
    for j in range(k):
        d = H[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        ok &= d > 1e-12 * np.abs(H[..., j, j])
        ok &= H[..., j, j] > 0
        ljj = np.sqrt(np.where(d > 0, d, 1.0))
        L[..., j, j] = ljj
        for i in range(j + 1, k):
            L[..., i, j] = (H[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j], axis=-1)) / ljj
    y = np.zeros_like(g)
    for i in range(k):
        y[..., i] = (g[..., i] - np.sum(L[..., i, :i] * y[..., :i], axis=-1)) / L[..., i, i]
    x = np.zeros_like(g)
    for i in reversed(range(k)):
        x[..., i] = (y[..., i] - np.sum(L[..., i + 1:, i] * x[..., i + 1:], axis=-1)) / L[..., i, i]
    ok &= np.all(np.isfinite(x), axis=-1)
    return x, ok


def lm_step_batch(t, omega, f, a, b, alpha, gamma, lam, weight_floor=WEIGHT_FLOOR):
    """One reweighted LM layer on a batch.

    Shapes: ``t, omega [B, 3]``, ``f [B]``, ``a [B, n, 3]``, ``b [B, n, 2]``;
    ``alpha, gamma, lam`` scalars or ``[B]``. Returns ``(t, omega, info)`` where
    ``info`` holds the weights, the (weighted) squared residual at the input pose
    and a ``singular`` flag. Flagged elements keep their input pose.
    """
    t = np.asarray(t, dtype=float)
    omega = np.asarray(omega, dtype=float)
    B = t.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (B,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (B,))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (B,))
    r, J, z = reprojection(t, omega, f, a, b)
    w = irls_weights(r, alpha, weight_floor)  # [B, n]
    sq_i = np.sum(r**2, axis=-1)
    Jf = J.reshape(B, -1, 6)
    Jw = Jf * np.repeat(w, 2, axis=-1)[..., None]
    A = np.swapaxes(Jw, -1, -2) @ Jf
    g = (np.swapaxes(Jw, -1, -2) @ r.reshape(B, -1, 1))[..., 0]
    diagA = np.diagonal(A, axis1=-2, axis2=-1)
    valid = np.all(np.abs(z) >= DEPTH_EPS, axis=-1) & np.all(np.isfinite(A), axis=(-2, -1))
    delta = np.zeros((B, 6))
    solved = ~valid
    for attempt in range(MAX_DAMPING_RETRIES + 1):
        todo = ~solved
        if not np.any(todo):
            break
        lam_k = lam[todo] if attempt == 0 else np.maximum(lam[todo], 1e-12) * 10.0**attempt
        H = A[todo] + lam_k[:, None, None] * (diagA[todo][:, :, None] * np.eye(6))
        d, ok = cholesky_solve(H, -g[todo])
        idx = np.flatnonzero(todo)
        delta[idx[ok]] = d[ok]
        solved[idx[ok]] = True
    singular = ~solved | ~valid
    delta[singular] = 0.0
    t_new = t + gamma[:, None] * delta[:, :3]
    omega_new = canonical_omega(omega + gamma[:, None] * delta[:, 3:])
    info = {
        "weights": w,
        "weighted_sq": np.sum(w * sq_i, axis=-1),
        "sq": np.sum(sq_i, axis=-1),
        "singular": singular,
    }
    return t_new, omega_new, info


def _cfg_arrays(cfg, B):
    def expand(v):
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(v, (B, v.shape[-1]))
    return expand(cfg.alpha), expand(cfg.gamma), expand(cfg.lam)


def refine_batch(t0, omega0, f, a, b, alpha, gamma, lam, weight_floor=WEIGHT_FLOOR, trace=False):
    """Run ``m`` layers on a batch; hyperparameters are ``[m]`` or ``[B, m]`` arrays.

    Returns ``(t, omega, singular_any)`` or, with ``trace=True``, additionally a
    dict of per-layer arrays (poses, squared residuals, weights).
    """
    t = np.array(t0, dtype=float)
    omega = np.array(omega0, dtype=float)
    B = t.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (B, np.shape(alpha)[-1]))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), alpha.shape)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), alpha.shape)
    m = alpha.shape[-1]
    flags = np.zeros(B, dtype=bool)
    rec = {"t": [t], "omega": [omega], "weighted_sq": [], "sq": [], "weights": [], "singular": []}
    for j in range(m):
        t, omega, info = lm_step_batch(t, omega, f, a, b, alpha[:, j], gamma[:, j], lam[:, j],
                                       weight_floor)
        flags |= info["singular"]
        if trace:
            rec["t"].append(t)
            rec["omega"].append(omega)
            for k in ("weighted_sq", "sq", "weights", "singular"):
                rec[k].append(info[k])
    if trace:
        # residual bookkeeping for the final pose, weighted with the last layer's alpha
        r, _, _ = reprojection(t, omega, f, a, b, jac=False)
        w = irls_weights(r, alpha[:, -1], weight_floor)
        sq_i = np.sum(r**2, axis=-1)
        rec["weighted_sq"].append(np.sum(w * sq_i, axis=-1))
        rec["sq"].append(np.sum(sq_i, axis=-1))
        rec["weights"].append(w)
        rec["singular"].append(np.zeros(B, dtype=bool))
        return t, omega, flags, rec
    return t, omega, flags


def _single(inst):
    return np.array([inst.f]), inst.a[None], inst.b[None]


def lm_layer(pose, inst, alpha, gamma, lam, weight_floor=WEIGHT_FLOOR, full_output=False):
    """One reweighted LM step from ``pose`` on ``inst``.

    If the damped normal matrix cannot be factorised, ``lam`` is raised tenfold up
    to three times; after that the input pose is returned and the ``singular``
    entry of the info dict is set.
    """
    f, a, b = _single(inst)
    t, w, info = lm_step_batch(pose.t[None], pose.omega[None], f, a, b,
                               alpha, gamma, lam, weight_floor)
    new = Pose(t[0], Rotation(w[0]))
    if full_output:
        return new, {k: v[0] for k, v in info.items()}
    return new


def refine(pose0, inst, cfg):
    """Apply exactly ``cfg.m`` layers to ``pose0``; returns ``(pose, LMTrace)``."""
    f, a, b = _single(inst)
    alpha, gamma, lam = _cfg_arrays(cfg, 1)
    t, w, flags, rec = refine_batch(pose0.t[None], pose0.omega[None], f, a, b,
                                    alpha, gamma, lam, cfg.weight_floor, trace=True)
    tr = LMTrace(
        poses=[Pose(tt[0], Rotation(ww[0])) for tt, ww in zip(rec["t"], rec["omega"])],
        weighted_sq=[float(v[0]) for v in rec["weighted_sq"]],
        sq=[float(v[0]) for v in rec["sq"]],
        weights=[v[0] for v in rec["weights"]],
        singular=[bool(v[0]) for v in rec["singular"]],
    )
    return tr.poses[-1], tr


def refine_many(poses, instances, cfg):
    """Refine equal-size instances together; returns a list of poses and flags."""
    t0 = np.array([p.t for p in poses])
    w0 = np.array([p.omega for p in poses])
    f = np.array([i.f for i in instances])
    a = np.array([i.a for i in instances])
    b = np.array([i.b for i in instances])
    t, w, flags = refine_batch(t0, w0, f, a, b, cfg.alpha, cfg.gamma, cfg.lam, cfg.weight_floor)
    return [Pose(tt, Rotation(ww)) for tt, ww in zip(t, w)], flags

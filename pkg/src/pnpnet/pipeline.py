"""Solvers behind one batched interface, plus the full learned pipeline.

Every solver takes preprocessed arrays (focal-normalised, correspondences
sorted) and returns ``(t [B, 3], omega [B, 3], ok [B])``. Failures never raise
out of ``run``; they come back as ``ok = False``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .epnp import epnp_batch, epnp_lm_batch
from .errors import PnPError, UnknownMethod
from .geometry import CameraIntrinsics, Pose, Rotation
from .irls_lm import LMConfig, refine_batch
from .mlp import NetParams, coarse_to_omega, coarse_to_pose, encode_batch, forward_batch, net_forward
from .irls_lm import refine
from .preprocess import F_CONST, ProblemInstance, preprocess, sort_order
from .ransac import RansacConfig, ransac_solve

METHODS = ("net", "pnp-net", "epnp", "epnp-lm", "ransac")


@dataclass(frozen=True)
class SolverContext:
    """Trained weights and solver settings shared by all methods of a run."""
    params: Optional[NetParams] = None
    lm: LMConfig = field(default_factory=LMConfig.constant)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    f_const: float = F_CONST


def prepare_arrays(a, b, f, f_const=F_CONST):
    """Focal normalisation and per-instance sorting for batched arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float) * (f_const / np.asarray(f, dtype=float))[:, None, None]
    orders = np.array([sort_order(ai, bi) for ai, bi in zip(a, b)])
    a = np.take_along_axis(a, orders[..., None], axis=1)
    b = np.take_along_axis(b, orders[..., None], axis=1)
    return a, b, np.full(len(a), float(f_const))


def _finite(t, w, ok):
    return ok & np.all(np.isfinite(t), axis=-1) & np.all(np.isfinite(w), axis=-1)


def _need_net(ctx, a):
    if ctx.params is None:
        raise UnknownMethod("methods 'net' and 'pnp-net' need trained weights")
    if ctx.params.n != a.shape[1]:
        raise UnknownMethod(f"weights are for n={ctx.params.n}, data has n={a.shape[1]}")


def _net(ctx, a, b, f, seed):
    _need_net(ctx, a)
    out, _ = forward_batch(ctx.params, encode_batch(a, b))
    return out[:, :3], coarse_to_omega(out), np.ones(len(a), dtype=bool)


def _pnp_net(ctx, a, b, f, seed):
    t0, w0, _ = _net(ctx, a, b, f, seed)
    lm = ctx.lm
    t, w, _ = refine_batch(t0, w0, f, a, b, lm.alpha, lm.gamma, lm.lam, lm.weight_floor)
    return t, w, np.ones(len(a), dtype=bool)


def _epnp(ctx, a, b, f, seed):
    return epnp_batch(a, b, f)


def _epnp_lm(ctx, a, b, f, seed):
    return epnp_lm_batch(a, b, f, ctx.lm)


def _ransac(ctx, a, b, f, seed):
    B = len(a)
    t = np.zeros((B, 3))
    w = np.zeros((B, 3))
    ok = np.zeros(B, dtype=bool)
    for i in range(B):
        inst = ProblemInstance(CameraIntrinsics(f[i]), a[i], b[i])
        rng = np.random.default_rng([seed, i])
        try:
            pose, info = ransac_solve(inst, ctx.ransac, ctx.lm, rng=rng, full_output=True)
        except PnPError:
            continue
        t[i], w[i], ok[i] = pose.t, pose.omega, not info["flagged"]
    return t, w, ok


_SOLVERS = {"net": _net, "pnp-net": _pnp_net, "epnp": _epnp, "epnp-lm": _epnp_lm,
            "ransac": _ransac}


def run(method, ctx, a, b, f, seed=0, truth=None):
    """Solve preprocessed arrays with ``method``; solver errors mark rows as failed.

    ``method == "truth"`` returns ``truth`` (a ``(t, omega)`` pair), which is the
    oracle used to sanity-check the evaluation harness.
    """
    B = len(a)
    if method == "truth":
        if truth is None:
            raise UnknownMethod("the truth oracle needs ground-truth poses")
        return np.array(truth[0], dtype=float), np.array(truth[1], dtype=float), np.ones(B, bool)
    if method not in _SOLVERS:
        raise UnknownMethod(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    fn = _SOLVERS[method]
    if method in ("net", "pnp-net"):
        _need_net(ctx, a)
    with np.errstate(all="ignore"):
        try:
            t, w, ok = fn(ctx, a, b, f, seed)
        except PnPError:
            # fall back to one instance at a time so one bad row cannot sink the batch
            t, w, ok = np.zeros((B, 3)), np.zeros((B, 3)), np.zeros(B, dtype=bool)
            for i in range(B):
                try:
                    ti, wi, oki = fn(ctx, a[i:i + 1], b[i:i + 1], f[i:i + 1], seed)
                    t[i], w[i], ok[i] = ti[0], wi[0], oki[0]
                except PnPError:
                    pass
    return t, w, _finite(t, w, ok)


def pnp_net_solve(inst, params, lm):
    """Full learned pipeline on one instance: preprocess, network, refiner."""
    p = preprocess(inst, F_CONST)
    pose0 = coarse_to_pose(net_forward(params, p))
    pose, _ = refine(pose0, p, lm)
    return pose


def solve_instance(method, inst, ctx, seed=0):
    """Pose for a single (raw) instance, or raise ``PnPError`` on failure."""
    a, b, f = prepare_arrays(inst.a[None], inst.b[None], np.array([inst.f]), ctx.f_const)
    t, w, ok = run(method, ctx, a, b, f, seed)
    if not ok[0]:
        raise PnPError(f"{method} produced no valid pose")
    return Pose(t[0], Rotation(w[0]))

"""End-to-end training of the initialiser network and the refiner hyperparameters.

The loss is ``w1 e_t(coarse) + w2 e_r(coarse) + c(u) (w3 e_t(refined) + w4 e_r(refined))``
where ``c(u)`` is a curriculum weight that stays at 0 for the first part of
training and then ramps linearly to 1.

Gradients of the coarse terms are exact (analytic loss gradient, then
``backward_batch``). Gradients of the refined terms go through central finite
differences of ``refine`` with respect to the 7 network outputs and the ``3m``
LM hyperparameters, evaluated on a subset of the batch ("probes"), then chained
into the network.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigError, MissingGroundTruth, NonFiniteLoss
from .geometry import rodrigues, rodrigues_grad, rotation_angle_between
from .irls_lm import LMConfig, refine_batch, softplus
from .mlp import (CoarsePose, NetParams, backward_batch, coarse_to_omega, coarse_to_omega_grad,
                  encode_batch, forward_batch, init_params)
from .preprocess import F_CONST, sort_order
from .synthgen import ScenarioConfig, sample_batch

log = logging.getLogger(__name__)

ACOS_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    total_updates: int = 20000
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"      # "constant" | "cosine"
    lr_floor: float = 0.1              # cosine ends at lr_floor * learning_rate
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum_start: float = 0.5
    curriculum_end: float = 0.75
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    fd_step: float = 1e-4
    probes: int = 16
    lm_layers: int = 10
    lm_init: tuple = (1.0, 0.5, 1e-3)
    checkpoint_every: int = 1000
    validation_size: int = 256
    grad_clip: float = 10.0
    f_const: float = F_CONST
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine") or not 0 < self.lr_floor <= 1:
            raise ConfigError("lr_schedule must be 'constant' or 'cosine' with 0 < lr_floor <= 1")
        if not 0 <= self.curriculum_start <= self.curriculum_end <= 1:
            raise ConfigError("need 0 <= curriculum_start <= curriculum_end <= 1")
        if len(self.loss_weights) != 4 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights needs four non-negative values")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be positive")
        if self.batch_size < 1 or self.total_updates < 0 or self.probes < 0:
            raise ConfigError("batch_size, total_updates and probes must be non-negative")
        if self.lm_layers < 1:
            raise ConfigError("lm_layers must be at least 1")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "lm_init", tuple(float(w) for w in self.lm_init))

    def to_dict(self):
        return asdict(self)


def curriculum_weight(update, tc):
    """Multiplier of the refined-pose loss terms at ``update`` (non-decreasing, starts at 0)."""
    if tc.total_updates == 0:
        return 0.0
    u = update / tc.total_updates
    if u < tc.curriculum_start:
        return 0.0
    if u >= tc.curriculum_end:
        return 1.0
    return (u - tc.curriculum_start) / (tc.curriculum_end - tc.curriculum_start)


def learning_rate_at(update, tc):
    """Step size for ``update``: constant, or cosine decay from the base rate to ``lr_floor`` of it."""
    if tc.lr_schedule == "constant" or tc.total_updates == 0:
        return tc.learning_rate
    u = min(update / tc.total_updates, 1.0)
    return tc.learning_rate * (tc.lr_floor + (1 - tc.lr_floor) * 0.5 * (1 + np.cos(np.pi * u)))


@dataclass
class TrainReport:
    updates: List[int] = field(default_factory=list)
    intermediate_loss: List[float] = field(default_factory=list)
    final_loss: List[float] = field(default_factory=list)
    net_success: List[float] = field(default_factory=list)
    pipeline_success: List[float] = field(default_factory=list)
    curriculum: List[float] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)
    update_count: int = 0

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- loss pieces

def pose_errors(t_hat, omega_hat, t, omega):
    """Translation and rotation errors for batched arrays."""
    et = np.linalg.norm(t_hat - t, axis=-1)
    er = rotation_angle_between(rodrigues(omega_hat), rodrigues(omega))
    return et, er


def pose_error_grads(t_hat, omega_hat, t, omega):
    """Gradients of ``e_t`` and ``e_r`` w.r.t. ``t_hat`` and ``omega_hat`` (batched)."""
    diff = t_hat - t
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    g_t = np.where(norm > 0, diff / np.where(norm > 0, norm, 1.0), 0.0)
    R_true = rodrigues(omega)
    R_hat = rodrigues(omega_hat)
    c = (np.einsum("...ij,...ij->...", R_hat, R_true) - 1.0) / 2.0
    dR = rodrigues_grad(omega_hat)
    dc = 0.5 * np.einsum("...kij,...ij->...k", dR, R_true)
    inside = np.abs(c) < 1.0
    scale = np.where(inside, -1.0 / np.sqrt(np.maximum(1.0 - c**2, ACOS_EPS)), 0.0)
    g_w = scale[..., None] * dc
    return g_t, g_w


def loss(inst, coarse, refined, weights=(1.0, 1.0, 1.0, 1.0)):
    """Weighted sum of the four pose distances; returns ``(total, breakdown)``."""
    if inst.truth is None:
        raise MissingGroundTruth("the loss needs a ground-truth pose")
    truth = inst.truth
    terms = {}
    for name, pose in (("coarse", coarse), ("refined", refined)):
        et, er = pose_errors(pose.t, pose.omega, truth.t, truth.omega)
        terms[f"{name}_t"] = float(et)
        terms[f"{name}_r"] = float(er)
    w1, w2, w3, w4 = weights
    total = (w1 * terms["coarse_t"] + w2 * terms["coarse_r"]
             + w3 * terms["refined_t"] + w4 * terms["refined_r"])
    return total, terms


# ------------------------------------------------------ finite differences

def _refine_from_outputs(v, f, a, b, hyper, weight_floor):
    """Refined 6-vectors from raw network outputs ``v [K, 7]`` and hyperparameters ``[K, 3, m]``."""
    omega0 = coarse_to_omega(v)
    t, w, _ = refine_batch(v[:, :3], omega0, f, a, b, hyper[:, 0], hyper[:, 1], hyper[:, 2],
                           weight_floor)
    return np.concatenate([t, w], axis=-1)


def fd_sensitivity_batch(v, f, a, b, cfg, fd_step):
    """Central-difference sensitivities of refine for a batch of probes.

    Returns ``(S_in [P, 6, 7], S_hyp [P, 3, m, 6], bad [P])``. Probes whose
    perturbed refinements are not finite get zero sensitivities and ``bad`` set.
    """
    P = len(v)
    m = cfg.m
    base_h = np.stack([cfg.alpha, cfg.gamma, cfg.lam])
    D = 7 + 3 * m
    V = np.repeat(v[:, None, :], 2 * D, axis=1)
    H = np.repeat(np.broadcast_to(base_h, (P, 3, m))[:, None], 2 * D, axis=1).copy()
    for d in range(7):
        V[:, 2 * d, d] += fd_step
        V[:, 2 * d + 1, d] -= fd_step
    for q in range(3 * m):
        i, j = divmod(q, m)
        col = 2 * (7 + q)
        H[:, col, i, j] += fd_step
        H[:, col + 1, i, j] -= fd_step
    rep = lambda x: np.repeat(x, 2 * D, axis=0)
    out = _refine_from_outputs(V.reshape(-1, 7), rep(f), rep(a), rep(b),
                               H.reshape(-1, 3, m), cfg.weight_floor).reshape(P, D, 2, 6)
    diffs = (out[:, :, 0] - out[:, :, 1]) / (2 * fd_step)  # [P, D, 6]
    # rotation vectors may wrap at pi; treat such jumps as non-differentiable
    bad = ~np.all(np.isfinite(diffs), axis=(1, 2)) | np.any(np.abs(diffs) > 1e6, axis=(1, 2))
    diffs[bad] = 0.0
    S_in = np.swapaxes(diffs[:, :7], 1, 2)
    S_hyp = diffs[:, 7:].reshape(P, 3, m, 6)
    return S_in, S_hyp, bad


def fd_pose_sensitivity(inst, coarse, cfg, fd_step=1e-4):
    """Jacobian of the refined ``(t, omega)`` w.r.t. the 7 coarse outputs and each hyperparameter.

    Returns ``(S_in [6, 7], S_hyp)`` with ``S_hyp[name]`` a ``[m, 6]`` array for
    ``name`` in ``alpha``, ``gamma``, ``lam``, plus a ``flagged`` boolean.
    """
    if not fd_step > 0:
        raise ConfigError("fd_step must be positive")
    v = coarse.vector() if isinstance(coarse, CoarsePose) else np.asarray(coarse, dtype=float)
    S_in, S_hyp, bad = fd_sensitivity_batch(v[None], np.array([inst.f]), inst.a[None], inst.b[None],
                                            cfg, fd_step)
    hyp = {name: S_hyp[0, i] for i, name in enumerate(("alpha", "gamma", "lam"))}
    return S_in[0], hyp, bool(bad[0])


# ------------------------------------------------------------------ training

class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0

    def update(self, params, grads):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step
        c2 = 1 - b2**self.step
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out

    def state(self):
        return {"step": self.step, "m": self.m, "v": self.v}

    def load(self, state):
        self.step = int(state["step"])
        self.m = [np.array(x, dtype=float) for x in state["m"]]
        self.v = [np.array(x, dtype=float) for x in state["v"]]


def prepare_batch(batch, f_const=F_CONST):
    """Focal normalisation and correspondence sorting on batched arrays."""
    a, b, f = batch["a"], batch["b"], batch["f"]
    b = b * (f_const / f)[:, None, None]
    orders = np.array([sort_order(ai, bi) for ai, bi in zip(a, b)])
    a = np.take_along_axis(a, orders[..., None], axis=1)
    b = np.take_along_axis(b, orders[..., None], axis=1)
    return a, b, np.full(len(a), float(f_const))


@dataclass
class TrainState:
    params: NetParams
    lm_raw: np.ndarray
    adam: Adam
    update: int
    report: TrainReport

    def lm_config(self):
        return LMConfig.from_unconstrained(self.lm_raw)


def initial_state(tc, sc):
    params = init_params(tc.seed, sc.n, tc.f_const)
    lm = LMConfig.constant(tc.lm_layers, *tc.lm_init)
    lm_raw = lm.unconstrained()
    shapes = [x.shape for x in params.arrays()] + [lm_raw.shape]
    adam = Adam(shapes, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
    return TrainState(params, lm_raw, adam, 0, TrainReport())


def _clip(grads, limit):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if limit and norm > limit:
        grads = [g * (limit / norm) for g in grads]
    return grads, norm


def batch_gradients(state, tc, a, b, f, t_true, w_true, cweight, rng):
    """Loss value, per-term means and gradients for one mini-batch."""
    params = state.params
    cfg = state.lm_config()
    B = len(a)
    w1, w2, w3, w4 = tc.loss_weights
    X = encode_batch(a, b)
    out, cache = forward_batch(params, X)
    omega_c = coarse_to_omega(out)
    et_c, er_c = pose_errors(out[:, :3], omega_c, t_true, w_true)
    gt_c, gw_c = pose_error_grads(out[:, :3], omega_c, t_true, w_true)
    upstream = np.zeros((B, 7))
    upstream[:, :3] = w1 * gt_c
    upstream[:, 3:] = w2 * np.einsum("bk,bkj->bj", gw_c, coarse_to_omega_grad(out))
    upstream /= B
    lm_grad = np.zeros_like(state.lm_raw)
    terms = {"coarse_t": float(et_c.mean()), "coarse_r": float(er_c.mean()),
             "refined_t": float("nan"), "refined_r": float("nan")}
    total = w1 * terms["coarse_t"] + w2 * terms["coarse_r"]
    if cweight > 0 and tc.probes > 0:
        P = min(tc.probes, B)
        idx = np.sort(rng.choice(B, P, replace=False))
        hyper = np.broadcast_to(np.stack([cfg.alpha, cfg.gamma, cfg.lam]), (P, 3, cfg.m))
        ref = _refine_from_outputs(out[idx], f[idx], a[idx], b[idx], hyper, cfg.weight_floor)
        et_r, er_r = pose_errors(ref[:, :3], ref[:, 3:], t_true[idx], w_true[idx])
        gt_r, gw_r = pose_error_grads(ref[:, :3], ref[:, 3:], t_true[idx], w_true[idx])
        g_ref = cweight * np.concatenate([w3 * gt_r, w4 * gw_r], axis=-1) / P  # [P, 6]
        S_in, S_hyp, _ = fd_sensitivity_batch(out[idx], f[idx], a[idx], b[idx], cfg, tc.fd_step)
        upstream[idx] += np.einsum("pi,pij->pj", g_ref, S_in)
        dhyp = np.einsum("pi,pqmi->qm", g_ref, S_hyp)
        # chain through the softplus reparameterisation
        lm_grad = dhyp / (1.0 + np.exp(-state.lm_raw))
        terms["refined_t"] = float(et_r.mean())
        terms["refined_r"] = float(er_r.mean())
        total += cweight * (w3 * terms["refined_t"] + w4 * terms["refined_r"])
    grads = backward_batch(params, cache, upstream) + [lm_grad]
    return total, terms, grads


def validation_set(tc, sc):
    rng = np.random.default_rng([tc.seed, 2**31 - 1])
    batch = sample_batch(sc, rng, tc.validation_size)
    a, b, f = prepare_batch(batch, tc.f_const)
    return a, b, f, batch["t"], batch["omega"]


def evaluate_state(state, val, tr=np.deg2rad(1.0), tt=0.2):
    """Mean losses and success rates of the net alone and of the full pipeline."""
    a, b, f, t, w = val
    out, _ = forward_batch(state.params, encode_batch(a, b))
    omega_c = coarse_to_omega(out)
    et_c, er_c = pose_errors(out[:, :3], omega_c, t, w)
    cfg = state.lm_config()
    tt_r, ww_r, _ = refine_batch(out[:, :3], omega_c, f, a, b, cfg.alpha, cfg.gamma, cfg.lam,
                                 cfg.weight_floor)
    et_r, er_r = pose_errors(tt_r, ww_r, t, w)
    return {
        "intermediate": float(np.mean(et_c + er_c)),
        "final": float(np.mean(et_r + er_r)),
        "net_success": float(np.mean((er_c < tr) & (et_c < tt))),
        "pipeline_success": float(np.mean((er_r < tr) & (et_r < tt))),
    }


def train(tc, sc, state=None, checkpoint=None, log_path=None, progress=None, stop_at=None):
    """Run (or resume) training; returns ``(NetParams, LMConfig, TrainReport)``.

    ``stop_at`` ends this session early (after a checkpoint) without changing the
    schedule, which is tied to ``tc.total_updates``.

    ``checkpoint(state)`` is called every ``tc.checkpoint_every`` updates and at the
    end. Each update draws its batch from a generator seeded by ``(seed, update)``
    so a resumed run continues exactly where the original left off.
    """
    if state is None:
        state = initial_state(tc, sc)
    val = validation_set(tc, sc)
    report = state.report
    start = time.perf_counter()
    log_file = open(log_path, "a") if log_path else None
    last_good = None
    try:
        if state.update == 0:
            _record(state, tc, val, report, 0.0, log_file)
        end = tc.total_updates if stop_at is None else min(stop_at, tc.total_updates)
        while state.update < end:
            u = state.update
            rng = np.random.default_rng([tc.seed, u])
            batch = sample_batch(sc, rng, tc.batch_size)
            a, b, f = prepare_batch(batch, tc.f_const)
            cweight = curriculum_weight(u, tc)
            total, terms, grads = batch_gradients(state, tc, a, b, f, batch["t"], batch["omega"],
                                                  cweight, rng)
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(f"non-finite loss or gradient at update {u}")
            grads, _ = _clip(grads, tc.grad_clip)
            state.adam.lr = learning_rate_at(u, tc)
            new = state.adam.update(state.params.arrays() + [state.lm_raw], grads)
            state.params = state.params.with_arrays(new[:-1])
            state.lm_raw = new[-1]
            state.update = u + 1
            report.update_count = state.update
            if progress is not None:
                progress(state.update, total, terms)
            scheduled = state.update % tc.checkpoint_every == 0 or state.update == tc.total_updates
            if scheduled:
                _record(state, tc, val, report, time.perf_counter() - start, log_file)
            if scheduled or state.update == end:
                if checkpoint is not None:
                    checkpoint(state)
                last_good = state.update
    except NonFiniteLoss as exc:
        exc.last_checkpoint = last_good
        raise
    finally:
        if log_file:
            log_file.close()
    return state.params, state.lm_config(), report


def _record(state, tc, val, report, elapsed, log_file):
    metrics = evaluate_state(state, val)
    report.updates.append(state.update)
    report.intermediate_loss.append(metrics["intermediate"])
    report.final_loss.append(metrics["final"])
    report.net_success.append(metrics["net_success"])
    report.pipeline_success.append(metrics["pipeline_success"])
    report.curriculum.append(curriculum_weight(state.update, tc))
    report.wall_clock.append(round(elapsed, 3))
    report.update_count = state.update
    log.info("update %d: %s", state.update, metrics)
    if log_file:
        rec = {"update": state.update, **metrics, "curriculum": report.curriculum[-1]}
        log_file.write(json.dumps(rec) + "\n")
        log_file.flush()

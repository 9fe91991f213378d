"""Success-rate evaluation, outlier sweeps and operation counts.

A trial succeeds when the rotation error is below ``t_R`` and the translation
error below ``t_T``; rotation and translation success are also reported on
their own. All methods of one ``evaluate`` call see the same instances.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError
from .opcount import OpConfig, OpCount, count_ops  # noqa: F401  (re-exported)
from .pipeline import SolverContext, prepare_arrays, run
from .synthgen import ScenarioConfig, sample_batch
from .trainer import pose_errors

SUMMARY_COLUMNS = ["scenario", "pose_prior", "outliers", "n", "trials", "seed", "method",
                   "rot_success", "trans_success", "joint_success", "failures",
                   "median_err_r_deg", "median_err_t", "ops_total"]
TRIAL_COLUMNS = ["trial", "method", "err_r_rad", "err_t", "ok", "success"]


@dataclass(frozen=True)
class SuccessCriteria:
    t_R: float = 1.0
    t_T: float = 0.2
    degrees: bool = True   # t_R in degrees (default) or radians

    def __post_init__(self):
        if not (self.t_R > 0 and self.t_T > 0):
            raise ConfigError("success thresholds must be positive")

    @property
    def t_R_radians(self):
        return float(np.deg2rad(self.t_R)) if self.degrees else float(self.t_R)

    def judge(self, err_r, err_t):
        rot = err_r < self.t_R_radians
        trans = err_t < self.t_T
        return rot, trans, rot & trans


@dataclass
class MethodStats:
    rot_success: float
    trans_success: float
    joint_success: float
    failures: int
    err_r: np.ndarray
    err_t: np.ndarray
    ok: np.ndarray
    success: np.ndarray


@dataclass
class EvalReport:
    methods: Dict[str, MethodStats]
    trials: int
    scenario: dict
    criteria: SuccessCriteria
    seed: int
    outlier_count: Optional[int] = None
    op_counts: Dict[str, OpCount] = field(default_factory=dict)

    def joint(self, method):
        return self.methods[method].joint_success

    def summary_rows(self, label=""):
        rows = []
        for name, st in self.methods.items():
            ops = self.op_counts.get(name)
            outl = (self.outlier_count if self.outlier_count is not None
                    else ("random" if self.scenario.get("outliers") else 0))
            rows.append({
                "scenario": label, "pose_prior": self.scenario.get("pose_prior"),
                "outliers": outl, "n": self.scenario.get("n"), "trials": self.trials,
                "seed": self.seed, "method": name, "rot_success": st.rot_success,
                "trans_success": st.trans_success, "joint_success": st.joint_success,
                "failures": st.failures,
                "median_err_r_deg": float(np.degrees(np.median(st.err_r))),
                "median_err_t": float(np.median(st.err_t)),
                "ops_total": None if ops is None else ops.total,
            })
        return rows

    def trial_rows(self):
        rows = []
        for name, st in self.methods.items():
            for i in range(self.trials):
                rows.append({"trial": i, "method": name, "err_r_rad": float(st.err_r[i]),
                             "err_t": float(st.err_t[i]), "ok": bool(st.ok[i]),
                             "success": bool(st.success[i])})
        return rows


def score(t_hat, w_hat, ok, t, w, criteria):
    """Per-trial errors and success flags; failed rows get infinite errors."""
    with np.errstate(all="ignore"):
        err_t, err_r = pose_errors(t_hat, w_hat, t, w)
    err_t = np.where(ok & np.isfinite(err_t), err_t, np.inf)
    err_r = np.where(ok & np.isfinite(err_r), err_r, np.inf)
    rot, trans, joint = criteria.judge(err_r, err_t)
    return MethodStats(float(rot.mean()), float(trans.mean()), float(joint.mean()),
                       int((~ok).sum()), err_r, err_t, ok, joint)


def evaluate_arrays(methods, a, b, f, t, w, criteria=SuccessCriteria(), ctx=None, seed=0):
    """Evaluate ``methods`` on given raw arrays (focal normalisation and sorting applied here)."""
    ctx = ctx or SolverContext()
    ap, bp, fp = prepare_arrays(a, b, f, ctx.f_const)
    out = {}
    for name in methods:
        th, wh, ok = run(name, ctx, ap, bp, fp, seed=seed, truth=(t, w))
        out[name] = score(th, wh, ok, t, w, criteria)
    return out


def evaluate(methods, scenario: ScenarioConfig, criteria=SuccessCriteria(), trials=1000, seed=0,
             ctx=None, outlier_count=None, with_ops=True):
    """Paired evaluation of ``methods`` on ``trials`` instances drawn from ``scenario``."""
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    methods = list(methods)
    if not methods:
        raise ConfigError("no methods to evaluate")
    ctx = ctx or SolverContext()
    rng = np.random.default_rng(seed)
    batch = sample_batch(scenario, rng, trials, outlier_count)
    stats = evaluate_arrays(methods, batch["a"], batch["b"], batch["f"], batch["t"], batch["omega"],
                            criteria, ctx, seed)
    ops = {}
    if with_ops:
        cfg = OpConfig(lm_layers=ctx.lm.m, ransac=ctx.ransac)
        for name in methods:
            if name != "truth":
                ops[name] = count_ops(name, scenario.n, cfg)
    return EvalReport(stats, trials, scenario.to_dict(), criteria, seed, outlier_count, ops)


def sweep_outliers(methods, scenario, criteria=SuccessCriteria(), counts=(0, 1, 2, 3, 4), trials=1000,
                   seed=0, ctx=None):
    """One report per fixed mismatch count (same seed, so streams differ only in outliers)."""
    for c in counts:
        if not 0 <= c <= scenario.n:
            raise ConfigError(f"outlier count {c} outside [0, {scenario.n}]")
    return [evaluate(methods, replace(scenario, outlier_count=None), criteria, trials, seed, ctx,
                     outlier_count=c) for c in counts]


def ops_series(methods, n_values, config=None):
    """Rows of ``(n, method, counts...)`` for an ops-versus-n plot."""
    rows = []
    for n in n_values:
        for m in methods:
            rows.append({"n": n, "method": m, **count_ops(m, n, config).as_dict()})
    return rows

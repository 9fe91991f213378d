"""EPnP: closed-form pose from virtual control points.

World points are written as barycentric combinations of 4 control points
(centroid plus the principal axes of the cloud, 3 for planar clouds). The camera
frame control points live in the null space of a ``2n x 3k`` linear system;
their scale is fixed by preserving inter-control-point distances. Kernel
dimensions N = 1, 2, 3 are tried, each followed by a Gauss-Newton polish of the
betas, and the candidate with the smallest reprojection error wins.

All routines are vectorised over a leading batch axis so that RANSAC can fit
every hypothesis of an instance in one call.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from .errors import DegenerateConfiguration, InsufficientPoints
from .geometry import Pose, Rotation, reprojection

RANK_TOL = 1e-10
GN_ITERATIONS = 10


def control_points(a):
    """Centroid + principal-axis control points for ``a[B, n, 3]``.

    Returns ``(c [B, 4, 3], planar [B], collinear [B])``. For planar clouds the
    fourth point is meaningless and only the first three are used.
    """
    c0 = a.mean(axis=-2)
    centred = a - c0[..., None, :]
    cov = np.einsum("...ni,...nj->...ij", centred, centred) / a.shape[-2]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[..., ::-1]
    evecs = evecs[..., ::-1]
    scale = np.maximum(evals[..., :1], 1e-300)
    collinear = evals[..., 1] <= RANK_TOL * scale[..., 0]
    planar = ~collinear & (evals[..., 2] <= RANK_TOL * scale[..., 0])
    axes = np.sqrt(np.maximum(evals, 0.0))[..., None, :] * evecs  # columns scaled
    c = np.concatenate([c0[..., None, :], c0[..., None, :] + np.swapaxes(axes, -1, -2)], axis=-2)
    return c, planar, collinear


def barycentric(a, c, k=4):
    """Coefficients ``alpha [B, n, k]`` with ``alpha @ c[:, :k] = a`` and rows summing to 1."""
    c0 = c[..., 0, :]
    D = np.swapaxes(c[..., 1:k, :] - c0[..., None, :], -1, -2)  # [B, 3, k-1]
    rhs = np.swapaxes(a - c0[..., None, :], -1, -2)  # [B, 3, n]
    if k == 4:
        coef = np.linalg.solve(D, rhs)
    else:
        coef = np.linalg.pinv(D) @ rhs
    coef = np.swapaxes(coef, -1, -2)
    return np.concatenate([1.0 - coef.sum(axis=-1, keepdims=True), coef], axis=-1)


def _system(alphas, u):
    """The ``2n x 3k`` matrix M with ``M x = 0`` for camera control points ``x``."""
    B, n, k = alphas.shape
    M = np.zeros((B, n, 2, k, 3))
    M[..., 0, :, 0] = alphas
    M[..., 0, :, 2] = -alphas * u[..., 0:1]
    M[..., 1, :, 1] = alphas
    M[..., 1, :, 2] = -alphas * u[..., 1:2]
    return M.reshape(B, 2 * n, 3 * k)


def _distance_system(V, cw, k, N):
    """Constraint matrix ``L [B, P, N(N+1)/2]`` and squared world distances ``rho``.

    ``V [B, 3k, N]`` holds the kernel vectors; unknowns are the products
    ``beta_a beta_b`` for ``a <= b``.
    """
    pairs = list(combinations(range(k), 2))
    Vr = V.reshape(V.shape[0], k, 3, N)
    dv = np.stack([Vr[:, i] - Vr[:, j] for i, j in pairs], axis=1)  # [B, P, 3, N]
    cols = []
    for x in range(N):
        for y in range(x, N):
            dot = np.sum(dv[..., x] * dv[..., y], axis=-1)
            cols.append(dot if x == y else 2.0 * dot)
    L = np.stack(cols, axis=-1)
    rho = np.stack([np.sum((cw[:, i] - cw[:, j]) ** 2, axis=-1) for i, j in pairs], axis=1)
    return L, rho


def _initial_betas(L, rho, N):
    """Linearised beta estimate from the product unknowns."""
    prod = np.einsum("bij,bj->bi", np.linalg.pinv(L), rho)
    betas = np.zeros(prod.shape[:1] + (N,))
    b11 = prod[:, 0]
    b1 = np.sqrt(np.abs(b11))
    betas[:, 0] = b1
    # product index of (0, y) is y in the upper-triangle ordering
    safe = np.where(b1 > 0, b1, 1.0)
    for y in range(1, N):
        betas[:, y] = np.where(b1 > 0, prod[:, y] / safe, 0.0)
    return betas


def _gauss_newton_betas(betas, L, rho, N, iterations=GN_ITERATIONS):
    idx = [(x, y) for x in range(N) for y in range(x, N)]
    for _ in range(iterations):
        prods = np.stack([betas[:, x] * betas[:, y] for x, y in idx], axis=-1)
        err = rho - np.einsum("bpq,bq->bp", L, prods)
        # d prods / d beta
        D = np.zeros(prods.shape + (N,))
        for q, (x, y) in enumerate(idx):
            if x == y:
                D[:, q, x] = 2.0 * betas[:, x]
            else:
                D[:, q, x] = betas[:, y]
                D[:, q, y] = betas[:, x]
        Jb = np.einsum("bpq,bqn->bpn", L, D)
        step = np.einsum("bnp,bp->bn", np.linalg.pinv(Jb), err)
        betas = betas + step
    return betas


def procrustes(src, dst):
    """Rigid ``(R, t)`` minimising ``|R src + t - dst|`` with ``det R = +1``."""
    cs = src.mean(axis=-2)
    cd = dst.mean(axis=-2)
    H = np.einsum("...ni,...nj->...ij", dst - cd[..., None, :], src - cs[..., None, :])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    S = np.zeros(H.shape)
    S[..., 0, 0] = 1.0
    S[..., 1, 1] = 1.0
    S[..., 2, 2] = d
    R = U @ S @ Vt
    t = cd - np.einsum("...ij,...j->...i", R, cs)
    return R, t


def _rotation_to_omega(R):
    return np.array([Rotation.from_matrix(r).omega for r in R.reshape(-1, 3, 3)]).reshape(
        R.shape[:-2] + (3,))


def _pose_from_betas(V, betas, alphas, a, k):
    Xc = np.einsum("bqn,bn->bq", V, betas).reshape(-1, k, 3)
    pc = np.einsum("bnk,bkj->bnj", alphas, Xc)
    # the overall sign of the kernel vector is arbitrary: keep points in front
    flip = np.sum(pc[..., 2], axis=-1) < 0
    pc = np.where(flip[:, None, None], -pc, pc)
    return procrustes(a, pc)


def _solve_group(a, u, k, c):
    B, n, _ = a.shape
    alphas = barycentric(a, c, k)
    M = _system(alphas, u)
    MtM = np.einsum("bpi,bpj->bij", M, M)
    _, evecs = np.linalg.eigh(MtM)
    best_err = np.full(B, np.inf)
    best_R = np.tile(np.eye(3), (B, 1, 1))
    best_t = np.zeros((B, 3))
    cw = c[:, :k]
    max_N = 3 if k == 4 else 2
    for N in range(1, max_N + 1):
        V = evecs[..., :N]
        L, rho = _distance_system(V, cw, k, N)
        betas = _initial_betas(L, rho, N)
        betas = _gauss_newton_betas(betas, L, rho, N)
        R, t = _pose_from_betas(V, betas, alphas, a, k)
        p = np.einsum("bij,bnj->bni", R, a) + t[:, None, :]
        z = p[..., 2]
        good = np.all(np.abs(z) > 1e-12, axis=-1) & np.all(np.isfinite(p), axis=(-2, -1))
        zs = np.where(np.abs(z) > 1e-12, z, 1.0)
        err = np.sum((p[..., :2] / zs[..., None] - u) ** 2, axis=(-2, -1))
        err = np.where(good & np.isfinite(err), err, np.inf)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_R = np.where(better[:, None, None], R, best_R)
        best_t = np.where(better[:, None], t, best_t)
    return best_R, best_t, best_err


def epnp_batch(a, b, f):
    """EPnP on a batch: ``a [B, n, 3]``, ``b [B, n, 2]``, ``f [B]``.

    Returns ``(t [B, 3], omega [B, 3], ok [B])``; ``ok`` is False for collinear
    configurations or when no candidate produced a finite pose.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    f = np.broadcast_to(np.asarray(f, dtype=float), a.shape[:1])
    if a.shape[-2] < 4:
        raise InsufficientPoints(f"EPnP needs at least 4 correspondences, got {a.shape[-2]}")
    B = a.shape[0]
    u = b / f[:, None, None]
    c, planar, collinear = control_points(a)
    R = np.tile(np.eye(3), (B, 1, 1))
    t = np.zeros((B, 3))
    ok = ~collinear
    for k, group in ((4, ~planar & ~collinear), (3, planar)):
        idx = np.flatnonzero(group)
        if idx.size == 0:
            continue
        Rg, tg, err = _solve_group(a[idx], u[idx], k, c[idx])
        R[idx] = Rg
        t[idx] = tg
        ok[idx] &= np.isfinite(err)
    omega = _rotation_to_omega(R)
    return t, omega, ok


def epnp_solve(inst):
    """EPnP pose for a ``ProblemInstance``.

    Raises ``InsufficientPoints`` for ``n < 4`` and ``DegenerateConfiguration``
    when the world points are collinear.
    """
    if inst.n < 4:
        raise InsufficientPoints(f"EPnP needs at least 4 correspondences, got {inst.n}")
    t, omega, ok = epnp_batch(inst.a[None], inst.b[None], np.array([inst.f]))
    if not ok[0]:
        raise DegenerateConfiguration("world points are collinear")
    return Pose(t[0], Rotation(omega[0]))


def epnp_lm_batch(a, b, f, cfg):
    """EPnP followed by the shared IRLS-LM refiner, batched."""
    from .irls_lm import refine_batch

    t0, w0, ok = epnp_batch(a, b, f)
    f = np.broadcast_to(np.asarray(f, dtype=float), a.shape[:1])
    t, w, flags = refine_batch(t0, w0, f, a, b, cfg.alpha, cfg.gamma, cfg.lam, cfg.weight_floor)
    good = ok & np.all(np.isfinite(t), axis=-1) & np.all(np.isfinite(w), axis=-1)
    return t, w, good


def epnp_lm(inst, cfg):
    """EPnP initialisation refined by ``irls_lm.refine`` (same code path as PnP-Net)."""
    from .irls_lm import refine

    pose0 = epnp_solve(inst)
    pose, _ = refine(pose0, inst, cfg)
    return pose

"""Arithmetic operation counts for the solvers.

Counting rules
--------------
* every addition, subtraction, multiplication and division counts once, so a
  multiply-add costs 2;
* negation, comparisons, ``max``/``min``/``abs`` and copies are free;
* each transcendental evaluation (sqrt, sin, cos, arccos, pow, exp, log) costs
  ``transcendental_cost`` operations (default 20);
* dense linear algebra counts every product, ignoring sparsity, except where the
  code below exploits structure explicitly (skew matrices, the 2x3 projection
  derivative);
* the generic branch is counted (rotation angle above the small-angle cutoff,
  no damping retries, no RANSAC early exit unless asked for).

The refiner and the network are additionally implemented in scalar Python over
``Num``, a float wrapper that tallies every operation it performs. Those
instrumented runs compute real poses (they double as numerical oracles for the
vectorised code) and their tallies must equal the closed forms exactly.

Library kernels that are not written out by hand are charged by convention:
a symmetric ``k x k`` eigendecomposition with vectors costs ``ceil(4.5 k^3)``
multiplications and as many additions; an LU factorisation costs
``(k^3 - k) / 3`` of each plus ``k (k - 1) / 2`` divisions, and each right-hand
side adds ``k (k - 1)`` of each plus ``k`` divisions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import UnknownMethod
from .ransac import RansacConfig, required_iterations

DEFAULT_TRANSCENDENTAL_COST = 20


@dataclass(frozen=True)
class OpCount:
    additions: int = 0
    multiplications: int = 0
    divisions: int = 0
    transcendentals: int = 0
    transcendental_cost: int = DEFAULT_TRANSCENDENTAL_COST

    @property
    def total(self):
        return (self.additions + self.multiplications + self.divisions
                + self.transcendental_cost * self.transcendentals)

    def __add__(self, other):
        return OpCount(self.additions + other.additions,
                       self.multiplications + other.multiplications,
                       self.divisions + other.divisions,
                       self.transcendentals + other.transcendentals,
                       self.transcendental_cost)

    def scaled(self, k):
        return OpCount(k * self.additions, k * self.multiplications, k * self.divisions,
                       k * self.transcendentals, self.transcendental_cost)

    def with_cost(self, cost):
        return OpCount(self.additions, self.multiplications, self.divisions,
                       self.transcendentals, cost)

    def as_dict(self):
        return {"additions": self.additions, "multiplications": self.multiplications,
                "divisions": self.divisions, "transcendentals": self.transcendentals,
                "total": self.total}


def _ops(add=0, mul=0, div=0, trans=0):
    return OpCount(int(add), int(mul), int(div), int(trans))


@dataclass(frozen=True)
class OpConfig:
    """Everything the counts depend on besides the method and ``n``."""
    lm_layers: int = 10
    ransac: RansacConfig = field(default_factory=RansacConfig)
    transcendental_cost: int = DEFAULT_TRANSCENDENTAL_COST
    inlier_ratio: float = 7.0 / 9.0   # for the expected RANSAC iteration count


# ---------------------------------------------------------------- tallying

class Tally:
    __slots__ = ("add", "mul", "div", "trans")

    def __init__(self):
        self.add = self.mul = self.div = self.trans = 0

    def count(self, cost=DEFAULT_TRANSCENDENTAL_COST):
        return OpCount(self.add, self.mul, self.div, self.trans, cost)


def _v(x):
    return x.v if isinstance(x, Num) else x


class Num:
    """A float that records the arithmetic it takes part in."""
    __slots__ = ("v", "t")

    def __init__(self, v, tally):
        self.v = float(v)
        self.t = tally

    def _bin(self, kind, value):
        setattr(self.t, kind, getattr(self.t, kind) + 1)
        return Num(value, self.t)

    def __add__(self, o):
        return self._bin("add", self.v + _v(o))

    __radd__ = __add__

    def __sub__(self, o):
        return self._bin("add", self.v - _v(o))

    def __rsub__(self, o):
        return self._bin("add", _v(o) - self.v)

    def __mul__(self, o):
        return self._bin("mul", self.v * _v(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return self._bin("div", self.v / _v(o))

    def __rtruediv__(self, o):
        return self._bin("div", _v(o) / self.v)

    def __neg__(self):
        return Num(-self.v, self.t)

    def __lt__(self, o):
        return self.v < _v(o)

    def __gt__(self, o):
        return self.v > _v(o)

    def __le__(self, o):
        return self.v <= _v(o)

    def __ge__(self, o):
        return self.v >= _v(o)

    def __float__(self):
        return self.v

    def __repr__(self):
        return f"Num({self.v!r})"


def _trans(fn, *args):
    tally = next((a.t for a in args if isinstance(a, Num)), None)
    value = fn(*map(_v, args))
    if tally is None:
        return value
    tally.trans += 1
    return Num(value, tally)


def sqrt(x):
    return _trans(math.sqrt, x)


def sin(x):
    return _trans(math.sin, x)


def cos(x):
    return _trans(math.cos, x)


def power(x, y):
    return _trans(math.pow, x, y)


def _max(x, y):
    """Free maximum; keeps the result tallied when either side is tallied."""
    out = x if _v(x) >= _v(y) else y
    tally = next((z.t for z in (x, y) if isinstance(z, Num)), None)
    return Num(_v(out), tally) if tally is not None and not isinstance(out, Num) else out


# ------------------------------------------------- scalar refiner (instrumented)

def _rodrigues_scalar(w):
    """Rotation matrix and ``theta^2`` (generic branch)."""
    w0, w1, w2 = w
    th2 = w0 * w0 + w1 * w1 + w2 * w2
    th = sqrt(th2)
    s, c = sin(th), cos(th)
    A = s / th
    Bc = (1.0 - c) / th2
    # [w]x^2 = w w^T - th^2 I
    p01, p02, p12 = w0 * w1, w0 * w2, w1 * w2
    d0, d1, d2 = w0 * w0 - th2, w1 * w1 - th2, w2 * w2 - th2
    q01, q02, q12 = Bc * p01, Bc * p02, Bc * p12
    a0, a1, a2 = A * w0, A * w1, A * w2
    R = [[1.0 + Bc * d0, q01 - a2, q02 + a1],
         [q01 + a2, 1.0 + Bc * d1, q12 - a0],
         [q02 - a1, q12 + a0, 1.0 + Bc * d2]]
    return R, th2


def _skew_times(q, R):
    """``[q]x @ R`` using the two non-zeros per row."""
    q0, q1, q2 = q
    rows = ((None, -q2, q1), (q2, None, -q0), (-q1, q0, None))
    out = []
    for row in rows:
        nz = [(c, k) for k, c in enumerate(row) if c is not None]
        (c1, k1), (c2, k2) = nz
        out.append([c1 * R[k1][j] + c2 * R[k2][j] for j in range(3)])
    return out


def _rodrigues_grad_scalar(w, R, th2):
    """``dR/dw_k = (w_k [w]x + [w x (I - R) e_k]x) R / th^2`` for k = 0, 1, 2."""
    inv = 1.0 / th2
    grads = []
    for k in range(3):
        v = [-R[i][k] for i in range(3)]
        v[k] = 1.0 - R[k][k]
        cross = [w[1] * v[2] - w[2] * v[1], w[2] * v[0] - w[0] * v[2], w[0] * v[1] - w[1] * v[0]]
        # w_k [w]x + [c]x = [w_k w + c]x
        q = [w[k] * w[i] + cross[i] for i in range(3)]
        M = _skew_times(q, R)
        grads.append([[M[i][j] * inv for j in range(3)] for i in range(3)])
    return grads


def _cholesky_solve_scalar(H, g):
    k = len(g)
    L = [[0.0] * k for _ in range(k)]
    for j in range(k):
        d = H[j][j]
        for p in range(j):
            d = d - L[j][p] * L[j][p]
        ljj = sqrt(d)
        L[j][j] = ljj
        for i in range(j + 1, k):
            s = H[i][j]
            for p in range(j):
                s = s - L[i][p] * L[j][p]
            L[i][j] = s / ljj
    y = [0.0] * k
    for i in range(k):
        s = g[i]
        for p in range(i):
            s = s - L[i][p] * y[p]
        y[i] = s / L[i][i]
    x = [0.0] * k
    for i in reversed(range(k)):
        s = y[i]
        for p in range(i + 1, k):
            s = s - L[p][i] * x[p]
        x[i] = s / L[i][i]
    return x


def scalar_lm_layer(t, w, f, a, b, alpha, gamma, lam, weight_floor):
    """One reweighted LM layer written out in scalars (generic branch only).

    Works on plain floats or on ``Num``; returns ``(t_new, w_new)`` as lists.
    """
    R, th2 = _rodrigues_scalar(w)
    dR = _rodrigues_grad_scalar(w, R, th2)
    A = [[0.0] * 6 for _ in range(6)]
    g = [0.0] * 6
    for ai, bi in zip(a, b):
        p = [R[i][0] * ai[0] + R[i][1] * ai[1] + R[i][2] * ai[2] + t[i] for i in range(3)]
        iz = 1.0 / p[2]
        fz = f * iz
        u, v = p[0] * iz, p[1] * iz
        r = [f * u - bi[0], f * v - bi[1]]
        nrm = sqrt(r[0] * r[0] + r[1] * r[1])
        wt = power(_max(nrm, weight_floor), -alpha)
        dp = [[dR[k][i][0] * ai[0] + dR[k][i][1] * ai[1] + dR[k][i][2] * ai[2]
               for k in range(3)] for i in range(3)]  # dp[i][k]
        fzu, fzv = fz * u, fz * v
        J = [[fz, 0.0, -fzu] + [fz * dp[0][k] - fzu * dp[2][k] for k in range(3)],
             [0.0, fz, -fzv] + [fz * dp[1][k] - fzv * dp[2][k] for k in range(3)]]
        Jw = [[wt * x for x in row] for row in J]
        for i in range(6):
            for j in range(i, 6):
                A[i][j] = A[i][j] + (Jw[0][i] * J[0][j] + Jw[1][i] * J[1][j])
            g[i] = g[i] + (Jw[0][i] * r[0] + Jw[1][i] * r[1])
    H = [[A[min(i, j)][max(i, j)] for j in range(6)] for i in range(6)]
    for i in range(6):
        H[i][i] = A[i][i] + lam * A[i][i]
    delta = _cholesky_solve_scalar(H, [-x for x in g])
    t_new = [t[i] + gamma * delta[i] for i in range(3)]
    w_new = [w[i] + gamma * delta[3 + i] for i in range(3)]
    # canonicalisation test (angle above pi?) -- generic branch keeps w_new
    sqrt(w_new[0] * w_new[0] + w_new[1] * w_new[1] + w_new[2] * w_new[2])
    return t_new, w_new


def instrumented_lm_layer(t, w, f, a, b, alpha, gamma, lam, weight_floor):
    """Run ``scalar_lm_layer`` on counting numbers; returns ``(t, w, OpCount)``."""
    tally = Tally()
    wrap = lambda x: Num(x, tally)
    t_new, w_new = scalar_lm_layer([wrap(x) for x in t], [wrap(x) for x in w], wrap(f),
                                   [[wrap(x) for x in row] for row in a],
                                   [[wrap(x) for x in row] for row in b],
                                   wrap(alpha), wrap(gamma), wrap(lam), weight_floor)
    return [float(x) for x in t_new], [float(x) for x in w_new], tally.count()


def instrumented_refine(t, w, f, a, b, cfg):
    total = OpCount()
    for j in range(cfg.m):
        t, w, c = instrumented_lm_layer(t, w, f, a, b, float(cfg.alpha[j]), float(cfg.gamma[j]),
                                        float(cfg.lam[j]), cfg.weight_floor)
        total = total + c
    return t, w, total


# ---------------------------------------------- scalar network (instrumented)

def scalar_net_forward(params, x, f_ratio=1.0):
    """Forward pass in scalars; ``x`` is the raw ``5n`` input row (b not yet normalised)."""
    n = params.n
    h = []
    for i, xi in enumerate(x):
        if i % 5 >= 3 and f_ratio is not None:
            xi = xi * f_ratio  # focal normalisation of the image coordinates
        h.append(xi * float(params.input_scale[i]))

    def dense(layers, h, relu_last):
        for li, (W, bias) in enumerate(layers):
            out = []
            for row, bj in zip(W, bias):
                s = float(bj)
                for wk, hk in zip(row, h):
                    s = s + float(wk) * hk
                if relu_last or li < len(layers) - 1:
                    s = _max(s, 0.0)
                out.append(s)
            h = out
        return h

    shared = dense(params.trunk, h, True)
    rot = dense(params.head_rot, shared, False)
    trans = dense(params.head_trans, shared, False)
    out = [o * float(s) for o, s in zip(trans + rot, params.output_scale)]
    assert len(out) == 7 and len(x) == 5 * n
    return out


def scalar_coarse_to_omega(v):
    s0, s1, s2, theta = v[3], v[4], v[5], _max(v[6], 0.0)
    norm = sqrt(s0 * s0 + s1 * s1 + s2 * s2)
    k = theta / norm
    return [k * s0, k * s1, k * s2]


def instrumented_net(params, x, f=None, f_const=800.0):
    """Network forward pass on counting numbers, including focal normalisation."""
    tally = Tally()
    wrap = lambda v: Num(v, tally)
    ratio = wrap(f_const) / wrap(f if f is not None else f_const)
    out = scalar_net_forward(params, [wrap(v) for v in x], ratio)
    omega = scalar_coarse_to_omega(out)
    return [float(v) for v in out], [float(v) for v in omega], tally.count()


# --------------------------------------------------------------- closed forms

def rodrigues_ops():
    return _ops(add=15, mul=18, div=2, trans=3)


def rodrigues_grad_ops():
    # per k: 1 + 3 + 3 + 9 additions (I - R, cross, q, [q]x R) and
    # 6 + 3 + 18 + 9 multiplications (cross, q, [q]x R, scaling)
    return _ops(add=3 * 16, mul=3 * 36, div=1)


def lm_point_ops():
    """Per-correspondence cost of one layer: residual, weight, Jacobian, normal equations."""
    add = 9 + 2 + 1 + 18 + 6 + 21 * 2 + 6 * 2
    mul = 9 + 1 + 2 + 2 + 2 + 27 + 2 + 12 + 12 + 21 * 2 + 6 * 2
    return _ops(add=add, mul=mul, div=1, trans=2)


def cholesky_ops(k=6):
    fac = sum(j + (k - 1 - j) * j for j in range(k))
    tri = k * (k - 1) // 2
    return _ops(add=fac + 2 * tri, mul=fac + 2 * tri, div=k * (k - 1) // 2 + 2 * k, trans=k)


def lm_layer_ops(n):
    damping = _ops(add=6, mul=6)
    update = _ops(add=6 + 2, mul=6 + 3, trans=1)
    return (rodrigues_ops() + rodrigues_grad_ops() + lm_point_ops().scaled(n) + damping
            + cholesky_ops(6) + update)


def refine_ops(n, m):
    return lm_layer_ops(n).scaled(m)


def dense_ops(fan_in, fan_out):
    return _ops(add=fan_in * fan_out, mul=fan_in * fan_out)


def net_ops(n):
    from .mlp import architecture

    arch = architecture(n)
    total = _ops(div=1, mul=2 * n)          # focal normalisation of b
    total = total + _ops(mul=5 * n)         # input scaling
    fan_in = 5 * n
    for out in arch["trunk"]:
        total = total + dense_ops(fan_in, out)
        fan_in = out
    for head in ("head_rot", "head_trans"):
        f_in = 3 * n
        for out in arch[head]:
            total = total + dense_ops(f_in, out)
            f_in = out
    total = total + _ops(mul=7)             # output scaling
    total = total + _ops(add=2, mul=3 + 3, div=1, trans=1)  # coarse_to_pose
    return total


def _eig_ops(k):
    c = math.ceil(4.5 * k ** 3)
    return _ops(add=c, mul=c)


def _lu_ops(k, rhs=1):
    return _ops(add=(k ** 3 - k) // 3 + rhs * k * (k - 1), mul=(k ** 3 - k) // 3 + rhs * k * (k - 1),
                div=k * (k - 1) // 2 + rhs * k)


def _lstsq_ops(p, q):
    """Normal-equation least squares of a ``p x q`` system with one right-hand side."""
    normal = q * (q + 1) // 2 * p
    return _ops(add=normal + q * p, mul=normal + q * p) + _lu_ops(q)


def _procrustes_ops(n):
    means = _ops(add=6 * n, div=6)
    centre = _ops(add=6 * n)
    cross = _ops(add=9 * n, mul=9 * n)
    svd = _eig_ops(3) + _ops(add=2 * 18, mul=2 * 27, div=3, trans=3)
    det_and_R = _ops(add=5 + 18, mul=12 + 27 + 3)
    t = _ops(add=9, mul=9)
    return means + centre + cross + svd + det_and_R + t


def _log_map_ops():
    return _ops(add=2 + 3, mul=3 + 1, div=2, trans=2)


def epnp_ops(n):
    """Closed-form EPnP cost for a non-planar cloud of ``n`` points (k = 4)."""
    k, P = 4, 6
    total = _ops(add=3 * n + 3 * n + 6 * n, mul=6 * n, div=3 + 6)   # centroid, covariance
    total = total + _eig_ops(3) + _ops(add=9, mul=9, trans=3)        # control points
    total = total + _ops(add=9 + 3 * n + 3 * n) + _lu_ops(3, rhs=n)  # barycentric coordinates
    total = total + _ops(mul=8 * n)                                  # the 2n x 12 system
    total = total + _ops(add=78 * 2 * n, mul=78 * 2 * n)             # M^T M
    total = total + _eig_ops(3 * k)
    for N in (1, 2, 3):
        Q = N * (N + 1) // 2
        total = total + _ops(add=18 * N + 12 * Q, mul=18 * Q + P * (Q - N))  # L
        total = total + _ops(add=30, mul=18)                                 # rho
        total = total + _lstsq_ops(P, Q) + _ops(div=N - 1, trans=1)          # initial betas
        gn = (_ops(mul=Q) + _ops(add=P * Q, mul=P * Q) + _ops(mul=N)
              + _ops(add=P * N * Q, mul=P * N * Q) + _lstsq_ops(P, N) + _ops(add=N))
        total = total + gn.scaled(10)
        total = total + _ops(add=12 * (N - 1), mul=12 * N)                   # control points
        total = total + _ops(add=9 * n + n, mul=12 * n)                      # camera points
        total = total + _procrustes_ops(n)
        total = total + _ops(add=9 * n + 2 * n + 3 * n, mul=9 * n + 2 * n + 2 * n, div=n)
    return total + _log_map_ops()


def score_ops(n):
    """Reprojecting all ``n`` correspondences under one hypothesis."""
    per = _ops(add=9 + 2 + 1 + 1, mul=9 + 2 + 2 + 2, div=1, trans=1)
    return rodrigues_ops() + per.scaled(n)


def ransac_ops(n, cfg, m, iterations=None):
    s = cfg.ransac.subset_size
    it = cfg.ransac.max_iterations if iterations is None else iterations
    per = epnp_ops(s) + refine_ops(s, m) + score_ops(n)
    final = epnp_ops(n) + refine_ops(n, m)
    return per.scaled(it) + final


METHODS = ("net", "refine", "pnp-net", "epnp", "epnp-lm", "ransac", "ransac-expected")


def count_ops(method, n, config=None):
    """Operation count of ``method`` at ``n`` correspondences (see module notes)."""
    cfg = config or OpConfig()
    m = cfg.lm_layers
    if method == "net":
        c = net_ops(n)
    elif method == "refine":
        c = refine_ops(n, m)
    elif method == "pnp-net":
        c = net_ops(n) + refine_ops(n, m)
    elif method == "epnp":
        c = epnp_ops(n)
    elif method == "epnp-lm":
        c = epnp_ops(n) + refine_ops(n, m)
    elif method == "ransac":
        c = ransac_ops(n, cfg, m)
    elif method == "ransac-expected":
        it = required_iterations(cfg.inlier_ratio, cfg.ransac.subset_size, cfg.ransac.confidence,
                                 cfg.ransac.max_iterations)
        c = ransac_ops(n, cfg, m, it)
    else:
        raise UnknownMethod(f"no operation count for method {method!r}; known: {', '.join(METHODS)}")
    return c.with_cost(cfg.transcendental_cost)

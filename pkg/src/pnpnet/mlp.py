"""Fully connected initialiser network with hand-written backpropagation.

Layout for ``n`` correspondences (input size ``5n``):

    trunk:  5n -> 20n -> 5n -> 3n           (ReLU after every layer)
    rot:    3n -> 2n x5 (ReLU) -> 4         (s_raw, theta), linear output
    trans:  3n -> 2n x5 (ReLU) -> 3         (t), linear output

Both heads read the same trunk output. The input row is
``(a_1, b_1, ..., a_n, b_n)`` after preprocessing, multiplied elementwise by a
fixed ``input_scale``; outputs are multiplied by a fixed ``output_scale``. Both
scale vectors are stored with the weights.

The 7-vector output order is ``(t_x, t_y, t_z, s_x, s_y, s_z, theta)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ShapeMismatch
from .geometry import Pose, Rotation
from .preprocess import F_CONST

HEAD_DEPTH = 5
WORLD_SCALE = 50.0
TRANSLATION_SCALE = 10.0

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class CoarsePose:
    t: np.ndarray
    s_raw: np.ndarray
    theta: float

    def vector(self):
        return np.concatenate([self.t, self.s_raw, [self.theta]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3].copy(), v[3:6].copy(), float(v[6]))


@dataclass(eq=False)
class NetParams:
    n: int
    trunk: List[Layer]
    head_rot: List[Layer]
    head_trans: List[Layer]
    input_scale: np.ndarray
    output_scale: np.ndarray

    def layers(self):
        return self.trunk + self.head_rot + self.head_trans

    def arrays(self):
        """Flat list of every trainable array (W, b per layer, trunk first)."""
        return [x for layer in self.layers() for x in layer]

    def with_arrays(self, arrays):
        it = iter(arrays)
        rebuild = lambda group: [(next(it), next(it)) for _ in group]
        return NetParams(self.n, rebuild(self.trunk), rebuild(self.head_rot),
                         rebuild(self.head_trans), self.input_scale, self.output_scale)

    def copy(self):
        return self.with_arrays([x.copy() for x in self.arrays()])

    def layer_sizes(self):
        return {name: [w.shape[0] for w, _ in group]
                for name, group in (("trunk", self.trunk), ("head_rot", self.head_rot),
                                    ("head_trans", self.head_trans))}

    def __eq__(self, other):
        if not isinstance(other, NetParams) or self.n != other.n:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return (len(mine) == len(theirs) and all(np.array_equal(x, y) for x, y in zip(mine, theirs))
                and np.array_equal(self.input_scale, other.input_scale)
                and np.array_equal(self.output_scale, other.output_scale))


def default_input_scale(n, f_const=F_CONST):
    per = np.array([1 / WORLD_SCALE] * 3 + [1 / f_const] * 2)
    return np.tile(per, n)


def default_output_scale():
    return np.array([TRANSLATION_SCALE] * 3 + [1.0] * 4)


def architecture(n):
    """Output sizes of every layer, keyed by block."""
    return {"trunk": [20 * n, 5 * n, 3 * n],
            "head_rot": [2 * n] * HEAD_DEPTH + [4],
            "head_trans": [2 * n] * HEAD_DEPTH + [3]}


def init_params(seed, n, f_const=F_CONST):
    """Uniform weights in ``+-sqrt(6 / fan_in)``, zero biases."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    sizes = architecture(n)

    def block(fan_in, outs):
        layers = []
        for out in outs:
            limit = np.sqrt(6.0 / fan_in)
            layers.append((rng.uniform(-limit, limit, (out, fan_in)), np.zeros(out)))
            fan_in = out
        return layers

    trunk = block(5 * n, sizes["trunk"])
    return NetParams(n, trunk, block(3 * n, sizes["head_rot"]), block(3 * n, sizes["head_trans"]),
                     default_input_scale(n, f_const), default_output_scale())


def encode(inst):
    """Network input row ``(a_1, b_1, ..., a_n, b_n)``."""
    return np.concatenate([inst.a, inst.b], axis=1).reshape(-1)


def encode_batch(a, b):
    return np.concatenate([a, b], axis=-1).reshape(a.shape[0], -1)


def _dense_forward(layers, h, relu_last):
    cache = []
    for i, (W, bias) in enumerate(layers):
        z = h @ W.T + bias
        cache.append((h, z))
        h = np.maximum(z, 0.0) if (relu_last or i < len(layers) - 1) else z
    return h, cache


def _dense_backward(layers, cache, grad, relu_last, grads_out):
    """Backpropagate ``grad`` (w.r.t. the block output); fills ``grads_out`` in layer order."""
    out = [None] * len(layers)
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        h, z = cache[i]
        if relu_last or i < len(layers) - 1:
            grad = grad * (z > 0)
        out[i] = (grad.T @ h, grad.sum(axis=0))
        grad = grad @ W
    grads_out.extend(out)
    return grad


def forward_batch(params, X):
    """Outputs ``[B, 7]`` for inputs ``X [B, 5n]`` plus the cache for ``backward_batch``."""
    if X.shape[-1] != 5 * params.n:
        raise ShapeMismatch(f"network expects {params.n} correspondences, got {X.shape[-1] // 5}")
    h0 = X * params.input_scale
    shared, c_trunk = _dense_forward(params.trunk, h0, relu_last=True)
    rot, c_rot = _dense_forward(params.head_rot, shared, relu_last=False)
    trans, c_trans = _dense_forward(params.head_trans, shared, relu_last=False)
    out = np.concatenate([trans, rot], axis=-1) * params.output_scale
    return out, (c_trunk, c_rot, c_trans)


def backward_batch(params, cache, upstream):
    """Parameter gradients of ``sum(upstream * outputs)`` (summed over the batch).

    Returned in the order of ``params.arrays()``. The ReLU derivative at 0 is 0.
    """
    c_trunk, c_rot, c_trans = cache
    g = upstream * params.output_scale
    g_trans, g_rot = g[:, :3], g[:, 3:]
    rot_grads, trans_grads, trunk_grads = [], [], []
    d_shared = _dense_backward(params.head_rot, c_rot, g_rot, False, rot_grads)
    d_shared = d_shared + _dense_backward(params.head_trans, c_trans, g_trans, False, trans_grads)
    _dense_backward(params.trunk, c_trunk, d_shared, True, trunk_grads)
    return [x for pair in trunk_grads + rot_grads + trans_grads for x in pair]


def net_forward(params, inst):
    """Coarse pose for a preprocessed instance."""
    if inst.n != params.n:
        raise ShapeMismatch(f"network trained for n={params.n}, instance has n={inst.n}")
    out, _ = forward_batch(params, encode(inst)[None])
    return CoarsePose.from_vector(out[0])


def net_backward(params, inst, upstream_grad):
    """Gradients of ``upstream_grad . net_forward(params, inst).vector()``."""
    if inst.n != params.n:
        raise ShapeMismatch(f"network trained for n={params.n}, instance has n={inst.n}")
    upstream = np.asarray(upstream_grad, dtype=float).reshape(1, 7)
    _, cache = forward_batch(params, encode(inst)[None])
    return backward_batch(params, cache, upstream)


def coarse_to_omega(v):
    """Axis-angle vectors from raw outputs ``v[..., 7]``; see ``coarse_to_pose``."""
    s = v[..., 3:6]
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    theta = np.clip(v[..., 6:7], 0.0, np.pi)
    return np.where(norm < 1e-8, 0.0, theta * s / np.where(norm < 1e-8, 1.0, norm))


def coarse_to_omega_grad(v):
    """Jacobian ``d omega / d v[3:7]`` as ``[..., 3, 4]`` (zero where theta is clamped)."""
    s = v[..., 3:6]
    norm = np.linalg.norm(s, axis=-1)
    safe = np.where(norm < 1e-8, 1.0, norm)
    u = s / safe[..., None]
    raw_theta = v[..., 6]
    theta = np.clip(raw_theta, 0.0, np.pi)
    inside = (raw_theta > 0.0) & (raw_theta < np.pi)
    proj = np.eye(3) - u[..., :, None] * u[..., None, :]
    G = np.zeros(v.shape[:-1] + (3, 4))
    G[..., :3] = (theta / safe)[..., None, None] * proj
    G[..., 3] = u * inside[..., None]
    G[norm < 1e-8] = 0.0
    return G


def coarse_to_pose(c):
    """``omega = clip(theta, 0, pi) * s_raw / |s_raw|``; identity rotation if ``|s_raw| < 1e-8``."""
    v = c.vector() if isinstance(c, CoarsePose) else np.asarray(c, dtype=float)
    return Pose(v[:3], Rotation(coarse_to_omega(v)))

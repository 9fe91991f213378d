"""Problem instances and the canonicalisation applied before the network."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NonPositiveFocal, ShapeMismatch
from .geometry import CameraIntrinsics, Correspondence, Pose

F_CONST = 800.0


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """``n`` world/image correspondences seen by a camera with focal length ``f``.

    ``a`` is ``[n, 3]`` world points, ``b`` is ``[n, 2]`` centred pixel coordinates.
    ``truth`` and ``outlier_mask`` are only known for synthetic data.
    """

    intrinsics: CameraIntrinsics
    a: np.ndarray
    b: np.ndarray
    truth: Optional[Pose] = None
    outlier_mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1, 3)
        b = np.array(self.b, dtype=float).reshape(-1, 2)
        if len(a) != len(b):
            raise ShapeMismatch(f"{len(a)} world points but {len(b)} image points")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("correspondence coordinates must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not isinstance(self.intrinsics, CameraIntrinsics):
            object.__setattr__(self, "intrinsics", CameraIntrinsics(float(self.intrinsics)))
        if self.outlier_mask is not None:
            mask = np.array(self.outlier_mask, dtype=bool).reshape(-1)
            if len(mask) != len(a):
                raise ShapeMismatch(f"outlier mask has length {len(mask)}, expected {len(a)}")
            mask.setflags(write=False)
            object.__setattr__(self, "outlier_mask", mask)

    @property
    def n(self):
        return len(self.a)

    @property
    def f(self):
        return self.intrinsics.f

    @property
    def corrs(self):
        return [Correspondence(a, b) for a, b in zip(self.a, self.b)]

    def subset(self, idx):
        idx = np.asarray(idx)
        mask = None if self.outlier_mask is None else self.outlier_mask[idx]
        return replace(self, a=self.a[idx], b=self.b[idx], outlier_mask=mask)

    def __eq__(self, other):
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        masks_equal = (self.outlier_mask is None and other.outlier_mask is None) or (
            self.outlier_mask is not None and other.outlier_mask is not None
            and np.array_equal(self.outlier_mask, other.outlier_mask))
        return (self.f == other.f and np.array_equal(self.a, other.a)
                and np.array_equal(self.b, other.b) and self.truth == other.truth
                and masks_equal)


def normalize_focal(inst, f_const=F_CONST):
    """Rescale image points so the instance behaves like a camera with ``f_const``.

    World points and the true pose are untouched: projecting under the returned
    instance reproduces the scaled image points.
    """
    if not f_const > 0:
        raise NonPositiveFocal(f"f_const must be positive, got {f_const}")
    f = inst.f
    if f == f_const:
        return inst
    return replace(inst, intrinsics=CameraIntrinsics(f_const), b=inst.b * (f_const / f))


def denormalize_points(b, f, f_const=F_CONST):
    return np.asarray(b) * (f / f_const)


def sort_order(a, b):
    """Permutation sorting by ``(b_x, b_y)`` with ties broken by ``(a_x, a_y, a_z)``."""
    # np.lexsort uses the last key as primary
    return np.lexsort((a[:, 2], a[:, 1], a[:, 0], b[:, 1], b[:, 0]))


def sort_correspondences(inst):
    order = sort_order(inst.a, inst.b)
    if np.array_equal(order, np.arange(inst.n)):
        return inst
    return inst.subset(order)


def preprocess(inst, f_const=F_CONST):
    return sort_correspondences(normalize_focal(inst, f_const))

"""The four topology/distance pairings and batched similarity matrices.

Scalar helpers (``neg_inner``, ``l2``, ``geodesic``, ``neg_trace``) act on
single points. :func:`distance_matrix` builds the ``b x b`` matrix of
*negative* distances that the contrastive loss consumes, as a tracked tensor
when its inputs are tracked.

Batch layouts: sphere and Euclidean batches are ``(b, d)``; oblique batches are
``(b, m, n)`` (one row per sub-sphere), i.e. the transpose of each
:class:`~obclip.geometry.ObliquePoint` matrix.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .geometry import EuclideanPoint, ObliquePoint, ShapeMismatch, SpherePoint


class DistanceKind(str, enum.Enum):
    SPHERE_NEG_INNER = "sphere_neg_inner"
    EUCLIDEAN_L2 = "euclidean_l2"
    OBLIQUE_GEODESIC = "oblique_geodesic"
    OBLIQUE_NEG_TRACE = "oblique_neg_trace"

    @property
    def oblique(self) -> bool:
        return self in (DistanceKind.OBLIQUE_GEODESIC, DistanceKind.OBLIQUE_NEG_TRACE)

    @property
    def is_metric(self) -> bool:
        return self in (DistanceKind.EUCLIDEAN_L2, DistanceKind.OBLIQUE_GEODESIC)

    @classmethod
    def parse(cls, value) -> "DistanceKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown distance kind {value!r}; expected one of: {names}") from None


def range_of(kind, n: int | None = None, m: int = 1) -> tuple[float, float]:
    """Theoretical output interval of the distance.

    The geodesic bound is ``pi * sqrt(m)``: each column contributes at most
    ``pi**2`` under the square root.
    """
    kind = DistanceKind.parse(kind)
    if kind is DistanceKind.SPHERE_NEG_INNER:
        return (-1.0, 1.0)
    if kind is DistanceKind.EUCLIDEAN_L2:
        return (0.0, math.inf)
    if kind is DistanceKind.OBLIQUE_GEODESIC:
        return (0.0, math.pi * math.sqrt(m))
    return (-float(m), float(m))


# --- scalar distances ----------------------------------------------------------

def _vec(p) -> np.ndarray:
    return p.vec if isinstance(p, (SpherePoint, EuclideanPoint)) else np.asarray(p, dtype=np.float64)


def _mat(p) -> np.ndarray:
    return p.mat if isinstance(p, ObliquePoint) else np.asarray(p, dtype=np.float64)


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")


def neg_inner(u, v) -> float:
    a, b = _vec(u), _vec(v)
    _check_same(a, b)
    return float(-np.einsum("i,i->", a, b))


def l2(u, v) -> float:
    a, b = _vec(u), _vec(v)
    _check_same(a, b)
    d = a - b
    return float(np.sqrt(np.einsum("i,i->", d, d)))


def column_cosines(u, v) -> np.ndarray:
    a, b = _mat(u), _mat(v)
    _check_same(a, b)
    return np.einsum("ij,ij->j", a, b)


def column_angles(a: np.ndarray, b: np.ndarray, axis: int = -2) -> np.ndarray:
    """Angles between unit columns, as ``2 atan2(|a-b|, |a+b|)``.

    Equal to ``arccos(a.b)`` for unit vectors but without its loss of precision
    near 0 and pi, so ``geodesic(u, u)`` is exactly 0.
    """
    return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=axis), np.linalg.norm(a + b, axis=axis))


def geodesic(u, v) -> float:
    a, b = _mat(u), _mat(v)
    _check_same(a, b)
    theta = column_angles(a, b)
    return float(np.sqrt(np.einsum("j,j->", theta, theta)))


def neg_trace(u, v) -> float:
    return float(-np.sum(column_cosines(u, v)))


def pair_distances(kind, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Distances between matched rows ``x[i]``, ``y[i]`` (vectorized scalar form).

    Oblique inputs are (N, n, m) stacks of matrices; others are (N, d).
    """
    kind = DistanceKind.parse(kind)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    if kind is DistanceKind.SPHERE_NEG_INNER:
        return -np.einsum("bi,bi->b", x, y)
    if kind is DistanceKind.EUCLIDEAN_L2:
        d = x - y
        return np.sqrt(np.einsum("bi,bi->b", d, d))
    if kind is DistanceKind.OBLIQUE_NEG_TRACE:
        return -np.sum(np.einsum("bij,bij->bj", x, y), axis=-1)
    theta = column_angles(x, y)
    return np.sqrt(np.einsum("bj,bj->b", theta, theta))


# --- batched negative-distance matrices ---------------------------------------

def stack_points(points: Sequence) -> np.ndarray:
    """Stack point objects into the batch layout used by :func:`distance_matrix`."""
    if all(isinstance(p, ObliquePoint) for p in points):
        return np.stack([p.mat.T for p in points])
    return np.stack([_vec(p) for p in points])


def distance_matrix(kind, U, V) -> Tensor:
    """Matrix whose entry (i, j) is ``-d(U_i, V_j)``.

    ``U`` and ``V`` may be tensors (tracked or not), arrays, or sequences of
    point objects. For the negative trace this is the single contraction
    ``einsum('imn,jmn->ij')`` over sub-spheres and coordinates.
    """
    kind = DistanceKind.parse(kind)
    if isinstance(U, (list, tuple)):
        U = stack_points(U)
    if isinstance(V, (list, tuple)):
        V = stack_points(V)
    U, V = as_tensor(U), as_tensor(V)
    if U.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"batch size mismatch: {U.shape[0]} vs {V.shape[0]}")
    if U.shape[1:] != V.shape[1:]:
        raise ShapeMismatch(f"point shape mismatch: {U.shape[1:]} vs {V.shape[1:]}")
    want = 3 if kind.oblique else 2
    if U.ndim != want:
        raise ShapeMismatch(f"{kind.value} expects {want}-d batches, got shape {U.shape}")
    b = U.shape[0]

    if kind is DistanceKind.SPHERE_NEG_INNER:
        return ops.matmul(U, ops.transpose(V))
    if kind is DistanceKind.EUCLIDEAN_L2:
        return ops.neg_pairwise_l2(U, V)
    if kind is DistanceKind.OBLIQUE_GEODESIC:
        return ops.neg_pairwise_geodesic(U, V)
    flat_u = ops.reshape(U, (b, U.shape[1] * U.shape[2]))
    flat_v = ops.reshape(V, (b, V.shape[1] * V.shape[2]))
    return ops.matmul(flat_u, ops.transpose(flat_v))

"""Embedding topologies and the parameter-free maps onto them.

An oblique point ``Ob(n, m)`` is an ``n x m`` matrix whose ``m`` columns are
unit vectors in ``R^n``. Flat feature vectors are folded column by column:
elements ``[j*n, (j+1)*n)`` become column ``j``.

Geometry paths are strict. A column with norm below :data:`DEGENERATE_NORM`
raises instead of being rescued by an epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-9
# norms this close to 1 are left alone so that projecting twice is bitwise a no-op
UNIT_SLACK = 1e-13


class GeometryError(ValueError):
    pass


class DegenerateVector(GeometryError):
    def __init__(self, norm: float, column: int | None = None):
        self.norm = norm
        self.column = column
        where = "" if column is None else f" in column {column}"
        super().__init__(f"near-zero vector{where} (norm={norm:.3g})")


class ShapeMismatch(GeometryError):
    pass


class ManifoldViolation(GeometryError):
    def __init__(self, max_deviation: float, tol: float):
        self.max_deviation = max_deviation
        self.tol = tol
        super().__init__(f"manifold constraint violated: max deviation {max_deviation:.3g} > tol {tol:.3g}")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EuclideanPoint:
    vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vec", _frozen(self.vec))
        if self.vec.ndim != 1:
            raise ShapeMismatch(f"expected a vector, got shape {self.vec.shape}")

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


@dataclass(frozen=True)
class SpherePoint:
    vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vec", _frozen(self.vec))
        if self.vec.ndim != 1:
            raise ShapeMismatch(f"expected a vector, got shape {self.vec.shape}")

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


@dataclass(frozen=True)
class ObliquePoint:
    mat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mat", _frozen(self.mat))
        if self.mat.ndim != 2:
            raise ShapeMismatch(f"expected an n x m matrix, got shape {self.mat.shape}")

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    @property
    def m(self) -> int:
        return self.mat.shape[1]

    def columns(self) -> np.ndarray:
        """The sub-sphere points as an (m, n) array."""
        return self.mat.T


def _as_vec(v) -> np.ndarray:
    if isinstance(v, (EuclideanPoint, SpherePoint)):
        return v.vec
    return np.asarray(v, dtype=np.float64)


def project_sphere(v) -> SpherePoint:
    x = _as_vec(v)
    norm = float(np.linalg.norm(x))
    if not norm >= DEGENERATE_NORM:
        raise DegenerateVector(norm)
    if abs(norm - 1.0) <= UNIT_SLACK:
        return SpherePoint(x)
    return SpherePoint(x / norm)


def normalize_columns(x: np.ndarray) -> np.ndarray:
    """Strict column normalization of an (n, m) array or a batch (..., n, m)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-2, keepdims=True)
    bad = ~(norms >= DEGENERATE_NORM)
    if np.any(bad):
        idx = np.argwhere(bad[..., 0, :])[0]
        raise DegenerateVector(float(norms[..., 0, :][tuple(idx)]), column=int(idx[-1]))
    norms = np.where(np.abs(norms - 1.0) <= UNIT_SLACK, 1.0, norms)
    return x / norms


def project_oblique(x) -> ObliquePoint:
    x = x.mat if isinstance(x, ObliquePoint) else np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected an n x m matrix, got shape {x.shape}")
    return ObliquePoint(normalize_columns(x))


def fold_columns(v: np.ndarray, n: int, m: int) -> np.ndarray:
    """Fold trailing axis of length n*m into (n, m) with contiguous columns."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n * m:
        raise ShapeMismatch(f"cannot fold dimension {v.shape[-1]} into Ob({n}, {m})")
    return np.swapaxes(v.reshape(v.shape[:-1] + (m, n)), -1, -2)


def reshape_to_oblique(v, n: int, m: int) -> ObliquePoint:
    x = _as_vec(v)
    if n < 1 or m < 1 or x.ndim != 1 or x.shape[0] != n * m:
        raise ShapeMismatch(f"vector of shape {x.shape} cannot be reshaped to Ob({n}, {m})")
    return project_oblique(fold_columns(x, n, m))


def validate(point, tol: float) -> None:
    """Raise :class:`ManifoldViolation` unless ``point`` satisfies its constraint."""
    if isinstance(point, SpherePoint):
        dev = abs(float(np.linalg.norm(point.vec)) - 1.0)
    elif isinstance(point, ObliquePoint):
        # diag(X^T X) = I_m
        dev = float(np.max(np.abs(np.einsum("ij,ij->j", point.mat, point.mat) - 1.0)))
    elif isinstance(point, EuclideanPoint):
        dev = 0.0 if np.all(np.isfinite(point.vec)) else np.inf
    else:
        raise TypeError(f"not a manifold point: {type(point).__name__}")
    if not dev <= tol:
        raise ManifoldViolation(dev, tol)

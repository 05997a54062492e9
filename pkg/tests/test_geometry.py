import numpy as np
import pytest

from obclip.geometry import (
    DegenerateVector,
    EuclideanPoint,
    ManifoldViolation,
    ObliquePoint,
    ShapeMismatch,
    SpherePoint,
    project_oblique,
    project_sphere,
    reshape_to_oblique,
    validate,
)
from obclip.props import geometry_suite


def test_project_sphere_examples():
    np.testing.assert_allclose(project_sphere(EuclideanPoint([3.0, 4.0])).vec, [0.6, 0.8])
    e1 = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(project_sphere(e1).vec, e1)
    with pytest.raises(DegenerateVector):
        project_sphere([0.0, 0.0])


def test_project_oblique_examples():
    p = project_oblique(np.array([[3.0, 0.0], [4.0, 1.0]]))
    np.testing.assert_allclose(p.mat, [[0.6, 0.0], [0.8, 1.0]])
    np.testing.assert_allclose(project_oblique(p).mat, p.mat, atol=1e-12)
    with pytest.raises(DegenerateVector) as err:
        project_oblique(np.array([[1.0, 0.0], [2.0, 0.0]]))
    assert err.value.column == 1


def test_reshape_to_oblique_examples():
    np.testing.assert_allclose(reshape_to_oblique([3.0, 4.0, 0.0, 1.0], 2, 2).mat, [[0.6, 0.0], [0.8, 1.0]])
    v = np.random.default_rng(0).standard_normal(7)
    np.testing.assert_allclose(reshape_to_oblique(v, 7, 1).mat[:, 0], project_sphere(v).vec, atol=1e-12)
    big = reshape_to_oblique(np.random.default_rng(1).standard_normal(512), 64, 8)
    assert big.mat.shape == (64, 8)
    with pytest.raises(ShapeMismatch):
        reshape_to_oblique(np.ones(6), 4, 2)


def test_reshape_fill_order_is_contiguous_per_column():
    v = np.arange(1.0, 7.0)
    p = reshape_to_oblique(v, 3, 2)
    np.testing.assert_allclose(p.mat[:, 0], v[:3] / np.linalg.norm(v[:3]))
    np.testing.assert_allclose(p.mat[:, 1], v[3:] / np.linalg.norm(v[3:]))


def test_validate():
    p = project_oblique(np.random.default_rng(2).standard_normal((4, 3)))
    validate(p, 1e-8)
    bad = p.mat.copy()
    bad[:, 1] *= 1.1
    with pytest.raises(ManifoldViolation) as err:
        validate(ObliquePoint(bad), 1e-8)
    assert err.value.max_deviation == pytest.approx(0.21)
    validate(project_sphere([1.0, 2.0, 3.0]), 1e-9)
    with pytest.raises(ManifoldViolation):
        validate(SpherePoint([1.0, 1.0]), 1e-9)


def test_points_are_immutable():
    p = project_sphere([1.0, 1.0])
    with pytest.raises(ValueError):
        p.vec[0] = 2.0


def test_geometry_property_suite():
    res = geometry_suite(seed=0)
    assert res.passed, res.summary()

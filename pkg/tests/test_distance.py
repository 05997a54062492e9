import math

import numpy as np
import pytest

from obclip import distance as dist
from obclip.distance import DistanceKind, distance_matrix, range_of
from obclip.geometry import EuclideanPoint, ObliquePoint, ShapeMismatch, project_oblique, project_sphere
from obclip.props import distance_suite, load_negtrace_counterexample, relaxed_triangle_instances


def _ob(rng, n, m):
    return project_oblique(rng.standard_normal((n, m)))


def test_neg_inner_examples():
    u = project_sphere([1.0, 2.0, 2.0])
    assert dist.neg_inner(u, u) == pytest.approx(-1.0)
    assert dist.neg_inner(project_sphere([1.0, 0.0]), project_sphere([0.0, 1.0])) == 0.0
    assert dist.neg_inner(u, project_sphere(-u.vec)) == pytest.approx(1.0)


def test_l2_examples():
    assert dist.l2(EuclideanPoint([0.0, 0.0]), EuclideanPoint([3.0, 4.0])) == 5.0
    assert dist.l2([1.0, 2.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ShapeMismatch):
        dist.l2([1.0], [1.0, 2.0])


def test_geodesic_examples():
    rng = np.random.default_rng(0)
    u = _ob(rng, 4, 8)
    assert dist.geodesic(u, u) == 0.0
    assert dist.geodesic(u, ObliquePoint(-u.mat)) == pytest.approx(8.8858, abs=1e-4)
    assert dist.geodesic(u, ObliquePoint(-u.mat)) == pytest.approx(math.pi * math.sqrt(8), abs=1e-12)
    a, b = _ob(rng, 5, 1), _ob(rng, 5, 1)
    expected = math.acos(-dist.neg_inner(a.mat[:, 0], b.mat[:, 0]))
    assert abs(dist.geodesic(a, b) - expected) < 1e-12


def test_neg_trace_examples():
    rng = np.random.default_rng(1)
    u = _ob(rng, 64, 8)
    assert dist.neg_trace(u, u) == pytest.approx(-8.0, abs=1e-12)
    e = np.eye(3)
    assert dist.neg_trace(ObliquePoint(e[:, :2]), ObliquePoint(e[:, [1, 2]])) == 0.0
    a, b = _ob(rng, 6, 1), _ob(rng, 6, 1)
    assert abs(dist.neg_trace(a, b) - dist.neg_inner(a.mat[:, 0], b.mat[:, 0])) < 1e-12


def test_range_of():
    assert range_of("sphere_neg_inner") == (-1.0, 1.0)
    assert range_of(DistanceKind.OBLIQUE_NEG_TRACE, 64, 8) == (-8.0, 8.0)
    assert range_of(DistanceKind.OBLIQUE_GEODESIC, 64, 8) == pytest.approx((0.0, math.pi * math.sqrt(8)))
    with pytest.raises(ValueError, match="unknown distance kind"):
        DistanceKind.parse("cosine")


def test_distance_matrix_examples():
    rng = np.random.default_rng(2)
    p = _ob(rng, 3, 4)
    np.testing.assert_allclose(distance_matrix("oblique_neg_trace", [p], [p]).data, [[4.0]])
    e = np.eye(4)
    u = [ObliquePoint(e[:, :2]), ObliquePoint(e[:, 2:])]
    np.testing.assert_array_equal(distance_matrix("oblique_neg_trace", u, u).data, [[2.0, 0.0], [0.0, 2.0]])
    with pytest.raises(ShapeMismatch):
        distance_matrix("sphere_neg_inner", np.ones((2, 3)), np.ones((3, 3)))


@pytest.mark.parametrize("kind", list(DistanceKind))
def test_distance_matrix_matches_double_loop(kind):
    rng = np.random.default_rng(3)
    b, n, m = 5, 4, 3
    if kind.oblique:
        U = [_ob(rng, n, m) for _ in range(b)]
        V = [_ob(rng, n, m) for _ in range(b)]
    elif kind is DistanceKind.SPHERE_NEG_INNER:
        U = [project_sphere(rng.standard_normal(6)) for _ in range(b)]
        V = [project_sphere(rng.standard_normal(6)) for _ in range(b)]
    else:
        U = [EuclideanPoint(rng.standard_normal(6)) for _ in range(b)]
        V = [EuclideanPoint(rng.standard_normal(6)) for _ in range(b)]
    scalar = {DistanceKind.SPHERE_NEG_INNER: dist.neg_inner, DistanceKind.EUCLIDEAN_L2: dist.l2,
              DistanceKind.OBLIQUE_GEODESIC: dist.geodesic, DistanceKind.OBLIQUE_NEG_TRACE: dist.neg_trace}[kind]
    expected = np.array([[-scalar(U[i], V[j]) for j in range(b)] for i in range(b)])
    got = distance_matrix(kind, U, V).data
    assert np.max(np.abs(got - expected)) < 1e-12


def test_counterexample_breaks_shifted_triangle():
    ce = load_negtrace_counterexample()
    x, y, z = ce["points"]
    for p in (x, y, z):
        assert np.allclose(np.linalg.norm(p.mat, axis=0), 1.0)
    d = lambda a, b: dist.neg_trace(a, b) + ce["shift"]  # noqa: E731
    assert d(x, z) > d(x, y) + d(y, z)


def test_relaxed_triangle_construction_respects_sides():
    for sides, closing in relaxed_triangle_instances(seed=5, count=50, eps_pos=0.1):
        assert max(sides) <= 0.1
        assert closing <= 0.3 + 1e-9


def test_distance_property_suite():
    res = distance_suite(seed=0)
    assert res.passed, res.summary()

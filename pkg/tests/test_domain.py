import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from rspde.domain import (ConvexDomain, DomainError, boundary_distance, distance, inradius,
                          project, sample_inside, verify_projection_properties)

DOMAINS = {
    "ball": ConvexDomain.ball([0.1, -0.2], 1.0),
    "box": ConvexDomain.box([-1.0, -0.5], [0.7, 2.0]),
    "halfspace": ConvexDomain.halfspace([0.6, 0.8], 0.5),
    "polytope": ConvexDomain.polytope([[1, 0], [0, 1], [-1, -1], [1, -2]], [1, 1, 1, 2]),
}

points = arrays(np.float64, (2,), elements=st.floats(-6, 6, allow_nan=False))


def qp_projection(x, D):
    """Independent projection by constrained minimisation."""
    A, b = D.normals, D.offsets
    res = minimize(lambda y: 0.5 * np.sum((y - x) ** 2), np.zeros(D.dim), jac=lambda y: y - x,
                   constraints=[{"type": "ineq", "fun": lambda y: b - A @ y,
                                 "jac": lambda y: -A}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def test_ball_projection_closed_form():
    D = ConvexDomain.ball([0, 0], 1.0)
    np.testing.assert_allclose(project(np.array([3.0, 0.0]), D), [1.0, 0.0])
    np.testing.assert_allclose(project(np.array([0.0, -2.0]), D), [0.0, -1.0])


def test_points_inside_are_returned_unchanged():
    for D in DOMAINS.values():
        x = sample_inside(D, 200, np.random.default_rng(0))
        x = x[distance(x, D) == 0.0]
        assert x.shape[0] > 100
        assert np.array_equal(project(x, D), x)


def test_box_and_halfspace_closed_forms():
    box = DOMAINS["box"]
    np.testing.assert_array_equal(project(np.array([5.0, -3.0]), box), [0.7, -0.5])
    hs = DOMAINS["halfspace"]
    x = np.array([3.0, 4.0])  # normal . x = 5, offset 0.5
    np.testing.assert_allclose(project(x, hs), x - 4.5 * np.array([0.6, 0.8]))


@settings(max_examples=60, deadline=None)
@given(points)
def test_polytope_projection_matches_qp(x):
    D = DOMAINS["polytope"]
    np.testing.assert_allclose(project(x, D), qp_projection(x, D), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(sorted(DOMAINS)), points, points)
def test_projection_inequalities(kind, x, x2):
    D = DOMAINS[kind]
    px, px2 = project(x, D), project(x2, D)
    nx = x - px
    assert np.linalg.norm(px - px2) <= np.linalg.norm(x - x2) + 1e-12
    assert np.dot(x2 - x, nx) <= np.dot(x2 - px2, nx) + 1e-10
    assert np.dot(px2 - x, nx) <= 1e-10
    assert np.dot(x, nx) >= inradius(D) * np.linalg.norm(nx) - 1e-10
    np.testing.assert_allclose(project(px, D), px, atol=1e-12)


@pytest.mark.parametrize("kind", sorted(DOMAINS))
def test_verify_projection_properties(kind):
    rep = verify_projection_properties(DOMAINS[kind], 5000, seed=1)
    assert rep.ok, rep.max_violation


def test_distance_and_boundary_distance():
    D = ConvexDomain.ball([0, 0], 2.0)
    assert distance(np.array([3.0, 0.0]), D) == pytest.approx(1.0)
    assert distance(np.array([1.0, 0.0]), D) == 0.0
    assert boundary_distance(np.array([0.5, 0.0]), D) == pytest.approx(1.5)
    assert boundary_distance(np.array([0.0, 3.0]), D) == pytest.approx(1.0)


def test_inradius_values():
    assert inradius(DOMAINS["ball"]) == pytest.approx(1.0 - np.hypot(0.1, 0.2))
    assert inradius(DOMAINS["box"]) == pytest.approx(0.5)
    assert inradius(DOMAINS["halfspace"]) == pytest.approx(0.5)


def test_invalid_domains_rejected():
    with pytest.raises(DomainError):
        ConvexDomain.ball([2.0, 0.0], 1.0)
    with pytest.raises(DomainError):
        ConvexDomain.box([0.1, -1], [1, 1])
    with pytest.raises(DomainError):
        ConvexDomain.halfspace([1.0, 0.0], -0.1)
    with pytest.raises(DomainError):
        ConvexDomain.from_dict({"kind": "cone"})


def test_dict_roundtrip():
    for D in DOMAINS.values():
        E = ConvexDomain.from_dict(D.to_dict())
        x = np.random.default_rng(3).normal(scale=3, size=(50, 2))
        np.testing.assert_allclose(project(x, D), project(x, E), atol=1e-12)

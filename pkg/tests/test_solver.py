import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import constant_problem, make_problem, problem_doc
from rspde.coefficients import GridSpec, problem_from_dict
from rspde.domain import ConvexDomain, distance, project
from rspde.paths import sample_path
from rspde.solver import (NumericalAbort, StabilityError, boundary_localization, check_resolve,
                          divergence, gradient, heat_step, implicit_penalty_resolve, solve,
                          write_snapshots)

DISC = ConvexDomain.ball([0.0, 0.0], 1.0)


def heat_oracle(x, amp, width, T, L, images=3):
    """Gaussian bump convolved with the heat kernel of 1/2 Laplacian, summed over images."""
    s2 = width ** 2 + T
    total = np.zeros_like(x)
    for m in range(-images, images + 1):
        total += np.exp(-0.5 * (x + 2 * L * m) ** 2 / s2)
    return width / np.sqrt(s2) * total[:, None] * np.asarray(amp)


# -- resolvent ---------------------------------------------------------------


def test_resolvent_worked_example():
    v = implicit_penalty_resolve(np.array([3.0, 0.0]), 1.0, DISC)
    np.testing.assert_allclose(v, [2.0, 0.0])


def test_resolvent_large_weight_tends_to_projection():
    w = np.array([[3.0, 4.0]])
    v = implicit_penalty_resolve(w, 1e8, DISC)
    np.testing.assert_allclose(v, project(w, DISC), atol=1e-7)


def test_resolvent_halfspace_by_hand():
    # D = {x_0 <= 1}; w = (3, 2), lam = 3: v = (1 + 2/4, 2)
    H = ConvexDomain.halfspace([1.0, 0.0], 1.0)
    v = implicit_penalty_resolve(np.array([3.0, 2.0]), 3.0, H)
    np.testing.assert_allclose(v, [1.5, 2.0])


def test_resolvent_rejects_negative_weight():
    with pytest.raises(ValueError):
        implicit_penalty_resolve(np.zeros(2), -1.0, DISC)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0, 1e4))
def test_resolvent_solves_its_equation(w, lam):
    w = np.array([w])
    v = implicit_penalty_resolve(w, lam, DISC)
    assert check_resolve(v, w, lam, DISC) <= 1e-12
    # the resolvent never moves a point farther from D
    assert distance(v, DISC)[0] <= distance(w, DISC)[0] + 1e-12


def test_check_resolve_flags_wrong_answer():
    with pytest.raises(NumericalAbort):
        check_resolve(np.array([[3.0, 0.0]]), np.array([[3.0, 0.0]]), 1.0, DISC)


# -- spatial operators -------------------------------------------------------


def test_heat_step_preserves_constants_exactly():
    grid = GridSpec(L=4.0, M=16, N=4, d=2)
    u = np.full(grid.shape + (2,), 0.3)
    assert np.array_equal(heat_step(u, 0.1, grid), u)


def test_heat_step_on_fourier_mode():
    grid = GridSpec(L=np.pi, M=32, N=4)
    x = grid.axis()
    u = np.cos(x)[:, None]
    lam = -4.0 / grid.dx ** 2 * np.sin(np.pi / grid.M) ** 2
    np.testing.assert_allclose(heat_step(u, 0.2, grid), u / (1 - 0.1 * lam), atol=1e-13)


def test_gradient_and_divergence_of_sine():
    grid = GridSpec(L=np.pi, M=64, N=4)
    x = grid.axis()
    u = np.sin(x)[:, None]
    g = gradient(u, grid)
    assert g.shape == (64, 1, 1)
    np.testing.assert_allclose(g[:, 0, 0], np.cos(x) * np.sin(grid.dx) / grid.dx, atol=1e-13)
    np.testing.assert_allclose(divergence(g, grid)[:, 0],
                               -np.sin(x) * (np.sin(grid.dx) / grid.dx) ** 2, atol=1e-12)


# -- full solves -------------------------------------------------------------


def test_heat_baseline_has_no_reflection():
    cfg = make_problem("heat", M=32, N=32)
    W = sample_path(cfg.T, cfg.grid.N, cfg.l, 0)
    for n in (4, 64, 1e4):
        _, meas, kd = solve(cfg, W, n)
        assert meas.total_variation() == 0.0
        assert np.all(kd.values == 0.0)


def test_heat_baseline_matches_kernel_and_converges():
    doc = problem_doc("heat")
    amp, width = doc["terminal"]["amplitude"], doc["terminal"]["width"]
    errs = []
    for M, N in ((32, 16), (64, 64), (128, 256)):
        cfg = make_problem("heat", M=M, N=N)
        sol, _, _ = solve(cfg, sample_path(cfg.T, N, cfg.l, 0), 16.0)
        exact = heat_oracle(cfg.grid.axis(), amp, width, cfg.T, cfg.grid.L)
        errs.append(np.sqrt(np.sum((sol.values[0] - exact) ** 2) * cfg.grid.dx))
    assert errs[0] / errs[1] >= 2.0 and errs[1] / errs[2] >= 2.0
    assert errs[-1] < 1e-3


def test_constant_terminal_is_a_fixed_point():
    cfg = constant_problem((0.2, -0.4), M=16, N=8)
    sol, meas, _ = solve(cfg, sample_path(cfg.T, 8, cfg.l, 3), 10.0)
    assert np.all(sol.values == np.array([0.2, -0.4]))
    assert meas.total_variation() == 0.0


def test_solve_is_deterministic():
    cfg = make_problem("outward", M=32, N=64)
    W = sample_path(cfg.T, 64, cfg.l, 5)
    a = solve(cfg, W, 32.0)[0].values
    b = solve(cfg, sample_path(cfg.T, 64, cfg.l, 5), 32.0)[0].values
    assert a.tobytes() == b.tobytes()


def test_density_points_back_into_domain():
    cfg = make_problem("outward", M=32, N=64)
    sol, meas, kd = solve(cfg, sample_path(cfg.T, 64, cfg.l, 1), 16.0)
    outside = distance(sol.values, cfg.domain) > 0
    assert outside.any()
    # k = -n (u - pi u) has nonpositive inner product with u - pi u
    delta = sol.values - project(sol.values, cfg.domain)
    assert np.all(np.sum(kd.values * delta, axis=-1) <= 0)
    assert np.all(meas.mass[-1] == 0)
    np.testing.assert_allclose(meas.mass[:-1], kd.values[:-1] * sol.dt * cfg.grid.cell_volume)
    loc = boundary_localization(sol, meas, 0.05)
    assert 0.0 <= loc.fraction <= 1.0 and not loc.zero_mass


def test_larger_penalty_pulls_closer():
    cfg = make_problem("outward", M=32, N=128)
    W = sample_path(cfg.T, 128, cfg.l, 2)
    d = [distance(solve(cfg, W, n)[0].values, cfg.domain).max() for n in (4, 64)]
    assert d[1] < d[0]


def test_stability_guard():
    doc = problem_doc("heat", N=2)
    doc["coefficients"]["lipschitz_c"] = 2.0
    cfg = problem_from_dict(doc)
    with pytest.raises(StabilityError):
        solve(cfg, sample_path(cfg.T, 2, cfg.l, 0), 4.0)


def test_nonfinite_aborts_with_location():
    doc = problem_doc("heat", M=16, N=8)
    cfg = problem_from_dict(doc)
    cfg.coefficients.f = lambda t, x, y, z: np.where(x[:, :1] > 0, np.inf, 0.0) * np.ones(2)
    with pytest.raises(NumericalAbort) as info:
        solve(cfg, sample_path(cfg.T, 8, cfg.l, 0), 4.0)
    assert info.value.step == 7 and info.value.node is not None


def test_path_grid_mismatch():
    cfg = make_problem("heat", M=16, N=8)
    with pytest.raises(ValueError):
        solve(cfg, sample_path(cfg.T, 16, cfg.l, 0), 4.0)
    with pytest.raises(ValueError):
        solve(cfg, sample_path(cfg.T, 8, 2, 0), 4.0)


def test_snapshot_csv(tmp_path):
    cfg = make_problem("heat", M=16, N=4)
    sol, _, _ = solve(cfg, sample_path(cfg.T, 4, cfg.l, 0), 4.0)
    write_snapshots(sol, tmp_path / "u.csv", steps=[0, 4])
    lines = (tmp_path / "u.csv").read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    assert any(ln == "# M=16" for ln in header)
    assert len(lines) == len(header) + 1 + 2 * 16

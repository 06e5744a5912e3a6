import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import constant_problem, make_problem
from rspde.bdsde import (GridMismatch, admissible_processes, apriori_stats, bdsde_residual,
                         interpolate, max_residual, reconstruct, skorokhod_pairing,
                         write_path_csv)
from rspde.coefficients import GridSpec
from rspde.paths import sample_path, sample_paths
from rspde.solver import solve


def _run(name, M, N, n, seed=0, P=20, **kw):
    cfg = make_problem(name, M=M, N=N) if name != "constant" else constant_problem(M=M, N=N)
    W = sample_path(cfg.T, N, cfg.l, seed)
    sol, meas, _ = solve(cfg, W, n)
    B = sample_paths(cfg.T, N, cfg.d, P, 100 + seed)
    x = np.random.default_rng(seed).uniform(-2, 2, size=(P, cfg.d))
    return cfg, W, sol, meas, reconstruct(sol, B, 0.0, x)


# -- interpolation -----------------------------------------------------------


def test_interpolation_exact_on_affine_and_nodes():
    grid = GridSpec(L=4.0, M=16, N=2, d=2)
    nodes = grid.nodes()
    vals = (2.0 * nodes[..., 0] - nodes[..., 1])[..., None]
    x = np.array([[0.1, 0.3], [-1.26, 2.2]])
    np.testing.assert_allclose(interpolate(vals, grid, x)[:, 0], 2 * x[:, 0] - x[:, 1])
    on_node = nodes[3, 5][None] + 1e-12
    assert interpolate(vals, grid, on_node)[0, 0] == vals[3, 5, 0]


def test_interpolation_is_periodic():
    grid = GridSpec(L=2.0, M=8, N=2)
    vals = np.sin(np.pi * grid.axis() / 2)[:, None]
    x = np.array([[0.37]])
    np.testing.assert_allclose(interpolate(vals, grid, x), interpolate(vals, grid, x + 4.0),
                               atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_interpolation_is_a_convex_combination(x):
    grid = GridSpec(L=3.0, M=12, N=2)
    vals = np.random.default_rng(1).normal(size=(12, 1))
    v = interpolate(vals, grid, np.array([[x]]))[0, 0]
    assert vals.min() - 1e-12 <= v <= vals.max() + 1e-12


# -- reconstruction ----------------------------------------------------------


def test_reconstruct_starts_on_the_field():
    cfg, W, sol, _, _ = _run("heat", 32, 16, 8.0)
    x = cfg.grid.nodes()[[3, 10]]
    tr = reconstruct(sol, sample_paths(cfg.T, 16, 1, 2, 0), 0.25, x)
    assert tr.start == 4
    np.testing.assert_array_equal(tr.Y[0], sol.values[4][[3, 10]])
    assert np.all(tr.K[0] == 0)
    with pytest.raises(GridMismatch):
        reconstruct(sol, sample_paths(cfg.T, 16, 1, 2, 0), 0.3, x)
    with pytest.raises(GridMismatch):
        reconstruct(sol, sample_paths(cfg.T, 8, 1, 2, 0), 0.0, x)


def test_constant_case_residual_is_zero():
    cfg, W, sol, _, tr = _run("constant", 16, 16, 10.0)
    R = bdsde_residual(tr, sol, W, cfg.coefficients, cfg.terminal)
    assert np.all(R == 0.0)


def test_heat_residual_decreases_under_refinement():
    cfg = make_problem("heat", M=256, N=1024)
    Wf = sample_path(cfg.T, 1024, cfg.l, 0)
    Bf = sample_paths(cfg.T, 1024, 1, 40, 7)
    x = np.random.default_rng(0).uniform(-2, 2, size=(40, 1))
    means = []
    for lev in range(3):
        M, N = 16 * 2 ** lev, 16 * 4 ** lev
        c = make_problem("heat", M=M, N=N)
        W = Wf.coarsen(1024 // N)
        sol, _, _ = solve(c, W, 16.0)
        xs = np.round((x + c.grid.L) / c.grid.dx) * c.grid.dx - c.grid.L
        tr = reconstruct(sol, Bf[::1024 // N], 0.0, xs)
        means.append(max_residual(bdsde_residual(tr, sol, W, c.coefficients, c.terminal)).mean())
    assert means[0] > means[1] > means[2]
    slope = np.polyfit(np.log([1 / 16, 1 / 64, 1 / 256]), np.log(means), 1)[0]
    assert slope >= 0.4


# -- minimality --------------------------------------------------------------


def test_pairing_nonpositive_for_admissible_processes():
    cfg, W, sol, _, tr = _run("outward", 32, 64, 16.0)
    rng = np.random.default_rng(3)
    for family in ("constant", "projection", "random_walk"):
        for v in admissible_processes(tr, cfg.domain, family, 10, rng):
            assert np.all(skorokhod_pairing(tr, v, cfg.domain) <= 1e-12)
    with pytest.raises(ValueError):
        admissible_processes(tr, cfg.domain, "other", 1, rng)


def test_pairing_rejects_outside_process():
    cfg, W, sol, _, tr = _run("outward", 32, 16, 16.0, P=3)
    with pytest.raises(ValueError):
        skorokhod_pairing(tr, np.array([2.0, 0.0]), cfg.domain)


def test_pairing_zero_on_heat_baseline():
    cfg, W, sol, _, tr = _run("heat", 32, 32, 16.0)
    assert np.all(skorokhod_pairing(tr, np.zeros(2), cfg.domain) == 0.0)


# -- a priori statistics -----------------------------------------------------


def test_apriori_jensen_and_ratios():
    cfg, W, sol, _, tr = _run("outward", 32, 64, 16.0, P=50)
    st_ = apriori_stats([tr], sol, cfg.coefficients, cfg.terminal)
    assert st_.jensen_ok()
    assert st_.data > 0
    assert all(np.isfinite(v) and v >= 0 for v in st_.ratios().values())
    with pytest.raises(ValueError):
        apriori_stats([], sol, cfg.coefficients, cfg.terminal)


def test_path_csv(tmp_path):
    cfg, W, sol, _, tr = _run("heat", 16, 8, 4.0, P=2)
    R = bdsde_residual(tr, sol, W, cfg.coefficients, cfg.terminal)
    write_path_csv(tr, tmp_path / "p.csv", R)
    body = [ln for ln in (tmp_path / "p.csv").read_text().splitlines() if not ln.startswith("#")]
    assert body[0].startswith("s,y0,y1,z_norm")
    assert len(body) == 1 + 9

import numpy as np
import pytest

from rspde.coefficients import (CONTRACT_MSG, TERMINAL_MSG, AssumptionError, GridSpec,
                                build_family, problem_from_dict, register_family,
                                require_valid, transform_to_laplacian, validate)

from conftest import make_problem, problem_doc


def test_grid_spec_invariants():
    g = GridSpec(L=4.0, M=16, N=10, d=2)
    assert g.dx == pytest.approx(0.5)
    assert g.cell_volume == pytest.approx(0.25)
    assert g.nodes().shape == (16, 16, 2)
    assert g.refined().M == 32 and g.refined().N == 40
    for bad in ({"M": 7}, {"M": 9}, {"N": 1}, {"L": 0.0}):
        args = {"L": 1.0, "M": 8, "N": 4}
        args.update(bad)
        with pytest.raises(ValueError):
            GridSpec(**args)


def test_heat_config_is_valid():
    rep = validate(make_problem("heat"))
    assert rep.ok, rep.failures
    assert rep.checks["contract_value"] == pytest.approx(0.1 + 0.01 / 2)


def test_contract_violation_is_named():
    doc = problem_doc()
    doc["coefficients"].update(alpha=0.4, beta=0.8)
    rep = validate(problem_from_dict(doc))
    assert not rep.ok
    assert CONTRACT_MSG in rep.failures
    assert rep.witnesses["contract"]["alpha+beta^2/2"] == pytest.approx(0.72)


def test_contract_boundary_is_rejected():
    doc = problem_doc()
    doc["coefficients"].update(alpha=0.3, beta=0.4 ** 0.5)  # 0.3 + 0.4/2 = 0.5
    assert CONTRACT_MSG in validate(problem_from_dict(doc)).failures


def test_terminal_outside_domain():
    doc = problem_doc()
    doc["terminal"]["amplitude"] = [1.2, 0.0]
    rep = validate(problem_from_dict(doc))
    assert TERMINAL_MSG in rep.failures
    assert rep.witnesses["terminal"]["distance"] == pytest.approx(0.2)
    with pytest.raises(AssumptionError):
        require_valid(problem_from_dict(doc))


def test_declared_bound_violation_detected():
    def liar(spec, role, k, d, l):
        def fn(t, x, y, z):
            return np.ones((x.shape[0], k))

        def bound(t, x):
            return np.full(x.shape[0], 0.5)
        return fn, bound, 0.0, 0.0

    register_family("liar", liar)
    doc = problem_doc()
    doc["coefficients"]["f"] = {"family": "liar"}
    rep = validate(problem_from_dict(doc))
    assert any("exceeds its declared bound" in f for f in rep.failures)


def test_lipschitz_violation_detected():
    doc = problem_doc()
    doc["coefficients"]["f"] = {"family": "affine_y", "matrix": [[3.0, 0], [0, 3.0]],
                                "width": 2.0}
    doc["coefficients"]["lipschitz_c"] = 1.0
    rep = validate(problem_from_dict(doc))
    assert any("Lipschitz" in f for f in rep.failures)


def test_family_shapes():
    x = np.zeros((5, 1))
    y = np.zeros((5, 2))
    z = np.zeros((5, 2, 1))
    f, *_ = build_family({"family": "outward", "strength": 2.0, "direction": [1, 1]},
                         "f", 2, 1, 1)
    np.testing.assert_allclose(f(0.0, x, y, z), np.full((5, 2), np.sqrt(2.0)))
    g, _, _, lz = build_family({"family": "tanh_z", "scale": 0.2}, "g", 2, 1, 1)
    assert g(0.0, x, y, z).shape == (5, 2, 1) and lz == 0.2
    h, *_ = build_family({"family": "bump", "value": [[1.0], [0.0]]}, "h", 2, 1, 1)
    assert h(0.0, x, y, z).shape == (5, 2, 1)
    with pytest.raises(ValueError):
        build_family({"family": "outward", "strength": 1, "direction": [1, 0]}, "g", 2, 1, 1)


def test_transform_to_laplacian_rescales():
    cfg = make_problem("heat")
    doc = problem_doc()
    doc["coefficients"]["f"] = {"family": "constant", "value": [1.0, 2.0]}
    doc["coefficients"]["h"] = {"family": "constant", "value": [[1.0], [0.0]]}
    cfg = problem_from_dict(doc)
    out = transform_to_laplacian([[0.5]], 1.0, cfg)
    assert out.T == pytest.approx(2.0 * cfg.T)
    x = np.zeros((1, 1))
    y = np.zeros((1, 2))
    z = np.ones((1, 2, 1))
    np.testing.assert_allclose(out.coefficients.f(0.0, x, y, z), [[0.5, 1.0]])
    np.testing.assert_allclose(out.coefficients.h(0.0, x, y, z), [[[2 ** -0.5], [0.0]]])
    # g = (0 + z (Lambda - a)) / 2 Lambda = z * 0.5 / 2
    np.testing.assert_allclose(out.coefficients.g(0.0, x, y, z), np.full((1, 2, 1), 0.25))
    assert out.coefficients.beta == pytest.approx(cfg.coefficients.beta / np.sqrt(2.0))


def test_transform_rejects_bad_matrices():
    cfg = make_problem("heat")
    with pytest.raises(ValueError):
        transform_to_laplacian([[-1.0]], 1.0, cfg)
    with pytest.raises(ValueError):
        transform_to_laplacian([[2.0]], 1.0, cfg)

"""Problem data: terminal condition, coefficients f, g, h and their checks.

Coefficient callbacks are vectorised over a batch of points::

    f(t, x, y, z) -> (P, k)      t: float, x: (P, d), y: (P, k), z: (P, k, d)
    g(t, x, y, z) -> (P, k, d)
    h(t, x, y, z) -> (P, k, l)

Bound functions ``f0, g0, h0`` map ``(t, x) -> (P,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .domain import ConvexDomain, distance

Coefficient = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Bound = Callable[[float, np.ndarray], np.ndarray]


class AssumptionError(ValueError):
    """Raised when problem data violates the standing assumptions."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("; ".join(report.failures))
        self.report = report


@dataclass(frozen=True)
class GridSpec:
    """Periodic grid on the torus ``[-L, L)^d`` with ``M`` nodes per axis."""

    L: float
    M: int
    N: int
    d: int = 1

    def __post_init__(self):
        if self.M < 8 or self.M % 2:
            raise ValueError("M must be even and >= 8")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.M

    @property
    def cell_volume(self) -> float:
        return self.dx ** self.d

    @property
    def volume(self) -> float:
        return (2.0 * self.L) ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    def axis(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.M)

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(M, ..., M, d)``."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    def refined(self, space: int = 2, time: int = 4) -> "GridSpec":
        return replace(self, M=self.M * space, N=self.N * time)


@dataclass
class CoefficientSet:
    f: Coefficient
    g: Coefficient
    h: Coefficient
    f0: Bound
    g0: Bound
    h0: Bound
    lipschitz_c: float
    alpha: float
    beta: float
    l: int = 1
    names: dict = field(default_factory=dict)


@dataclass
class ProblemConfig:
    d: int
    k: int
    l: int
    T: float
    terminal: Callable[[np.ndarray], np.ndarray]
    domain: ConvexDomain
    coefficients: CoefficientSet
    grid: GridSpec
    sample_radius: float = 3.0
    description: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.T / self.grid.N

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.grid.N + 1)


# ---------------------------------------------------------------------------
# built-in families


def gaussian_window(x: np.ndarray, width: float, center=0.0) -> np.ndarray:
    r2 = np.sum((x - center) ** 2, axis=-1)
    return np.exp(-0.5 * r2 / width ** 2)


def _zero(shape):
    def fn(t, x, y, z):
        return np.zeros((x.shape[0],) + shape)

    def bound(t, x):
        return np.zeros(x.shape[0])

    return fn, bound, 0.0, 0.0


def _constant(value, shape):
    value = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    norm = float(np.linalg.norm(value))

    def fn(t, x, y, z):
        return np.broadcast_to(value, (x.shape[0],) + shape).copy()

    def bound(t, x):
        return np.full(x.shape[0], norm)

    return fn, bound, 0.0, 0.0


def _bump(value, shape, width, center=0.0):
    value = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    norm = float(np.linalg.norm(value))

    def fn(t, x, y, z):
        w = gaussian_window(x, width, center)
        return w.reshape((-1,) + (1,) * len(shape)) * value

    def bound(t, x):
        return norm * gaussian_window(x, width, center)

    return fn, bound, 0.0, 0.0


def _affine_y(matrix, offset, k, width, radius):
    A = np.asarray(matrix, dtype=float).reshape(k, k)
    b = np.asarray(offset, dtype=float).reshape(k)
    opnorm = float(np.linalg.norm(A, 2))
    bnorm = float(np.linalg.norm(b))

    def fn(t, x, y, z):
        return gaussian_window(x, width)[:, None] * (y @ A.T + b)

    def bound(t, x):
        # valid on |y| <= radius, the range used by sampling checks
        return gaussian_window(x, width) * (opnorm * radius + bnorm)

    return fn, bound, opnorm, 0.0


def _tanh_z(scale, k, d, width):
    scale = float(scale)

    def fn(t, x, y, z):
        return scale * gaussian_window(x, width)[:, None, None] * np.tanh(z)

    def bound(t, x):
        return abs(scale) * np.sqrt(k * d) * gaussian_window(x, width)

    return fn, bound, 0.0, abs(scale)


def build_family(spec: dict, role: str, k: int, d: int, l: int, radius: float = 3.0):
    """Instantiate a named coefficient family.

    Returns ``(callback, bound, lipschitz_y, lipschitz_z)`` where the moduli
    are what the family itself guarantees.
    """
    shape = {"f": (k,), "g": (k, d), "h": (k, l)}[role]
    fam = spec.get("family", "zero")
    width = float(spec.get("width", 1.0))
    center = np.asarray(spec.get("center", 0.0), dtype=float)
    if fam == "zero":
        return _zero(shape)
    if fam == "constant":
        return _constant(spec["value"], shape)
    if fam == "bump":
        return _bump(spec["value"], shape, width, center)
    if fam == "outward":
        if role != "f":
            raise ValueError("'outward' family only applies to f")
        direction = np.asarray(spec["direction"], dtype=float)
        direction = direction / np.linalg.norm(direction)
        return _bump(float(spec["strength"]) * direction, shape, width, center)
    if fam == "affine_y":
        if role != "f":
            raise ValueError("'affine_y' family only applies to f")
        return _affine_y(spec["matrix"], spec.get("offset", np.zeros(k)), k, width, radius)
    if fam == "tanh_z":
        if role != "g":
            raise ValueError("'tanh_z' family only applies to g")
        return _tanh_z(spec["scale"], k, d, width)
    if fam in _USER_FAMILIES:
        return _USER_FAMILIES[fam](spec, role, k, d, l)
    raise ValueError(f"unknown coefficient family {fam!r}")


_USER_FAMILIES: dict[str, Callable] = {}


def register_family(name: str, builder: Callable) -> None:
    """Register ``builder(spec, role, k, d, l) -> (fn, bound, lip_y, lip_z)``."""
    _USER_FAMILIES[name] = builder


FAMILIES = ("zero", "constant", "bump", "outward", "affine_y", "tanh_z")


def build_terminal(spec: dict, k: int, d: int) -> Callable[[np.ndarray], np.ndarray]:
    """Terminal data Phi: ``(P, d) -> (P, k)``."""
    kind = spec.get("kind", "bump")
    if kind == "constant":
        value = np.asarray(spec["value"], dtype=float).reshape(k)
        return lambda x: np.broadcast_to(value, (x.shape[0], k)).copy()
    if kind == "bump":
        amp = np.asarray(spec["amplitude"], dtype=float).reshape(k)
        width = float(spec.get("width", 1.0))
        center = np.asarray(spec.get("center", 0.0), dtype=float)
        return lambda x: gaussian_window(x, width, center)[:, None] * amp
    raise ValueError(f"unknown terminal kind {kind!r}")


def build_coefficients(spec: dict, k: int, d: int, l: int, radius: float = 3.0) -> CoefficientSet:
    f, f0, cf_y, cf_z = build_family(spec.get("f", {}), "f", k, d, l, radius)
    g, g0, cg_y, cg_z = build_family(spec.get("g", {}), "g", k, d, l, radius)
    h, h0, ch_y, ch_z = build_family(spec.get("h", {}), "h", k, d, l, radius)
    return CoefficientSet(
        f=f, g=g, h=h, f0=f0, g0=g0, h0=h0,
        lipschitz_c=float(spec.get("lipschitz_c", 1.0)),
        alpha=float(spec.get("alpha", 0.1)),
        beta=float(spec.get("beta", 0.1)),
        l=l,
        names={r: spec.get(r, {}).get("family", "zero") for r in "fgh"},
    )


def problem_from_dict(spec: dict) -> ProblemConfig:
    dims = spec["dimensions"]
    d, k, l = int(dims["d"]), int(dims["k"]), int(dims["l"])
    radius = float(spec.get("sample_radius", 3.0))
    grid = GridSpec(L=float(spec["grid"]["L"]), M=int(spec["grid"]["M"]),
                    N=int(spec["grid"]["N"]), d=d)
    domain = ConvexDomain.from_dict(spec["domain"])
    if domain.dim != k:
        raise ValueError(f"domain dimension {domain.dim} does not match k={k}")
    return ProblemConfig(
        d=d, k=k, l=l, T=float(spec["horizon"]),
        terminal=build_terminal(spec["terminal"], k, d),
        domain=domain,
        coefficients=build_coefficients(spec.get("coefficients", {}), k, d, l, radius),
        grid=grid,
        sample_radius=radius,
        description=spec,
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    failures: list[str] = field(default_factory=list)
    witnesses: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, name: str, message: str, witness=None) -> None:
        self.failures.append(message)
        self.checks[name] = False
        if witness is not None:
            self.witnesses[name] = witness


CONTRACT_MSG = "contract property violated: alpha + beta^2/2 must be < 1/2"
TERMINAL_MSG = "terminal condition leaves domain"


def _random_inputs(config: ProblemConfig, samples: int, rng: np.random.Generator):
    d, k = config.d, config.k
    L, R = config.grid.L, config.sample_radius
    t = rng.uniform(0.0, config.T, size=samples)
    x = rng.uniform(-L, L, size=(samples, d))
    y = rng.uniform(-1, 1, size=(samples, k))
    y *= R / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1.0)
    z = rng.normal(scale=R / np.sqrt(k * d), size=(samples, k, d))
    return t, x, y, z


def _per_sample(fn, t, x, y, z):
    """Evaluate a batched callback where every sample has its own time."""
    return np.stack([fn(float(t[i]), x[i:i + 1], y[i:i + 1], z[i:i + 1])[0]
                     for i in range(t.size)])


def _per_sample_bound(fn, t, x):
    return np.array([fn(float(t[i]), x[i:i + 1])[0] for i in range(t.size)])


def validate(config: ProblemConfig, samples: int = 200, seed: int = 0,
             tol: float = 1e-9) -> ValidationReport:
    """Check the standing assumptions on the problem data.

    The contract property is checked exactly; bounds and Lipschitz moduli are
    checked on ``samples`` random input pairs; the terminal condition is
    checked on every grid node.
    """
    rep = ValidationReport()
    cs = config.coefficients
    contract = cs.alpha + cs.beta ** 2 / 2
    rep.checks["contract_value"] = contract
    if not (0 < cs.alpha < 1 and 0 < cs.beta < 1):
        rep.fail("moduli_range", "alpha and beta must lie in (0, 1)",
                 {"alpha": cs.alpha, "beta": cs.beta})
    if not contract < 0.5:
        rep.fail("contract", CONTRACT_MSG, {"alpha": cs.alpha, "beta": cs.beta,
                                            "alpha+beta^2/2": contract})
    else:
        rep.checks["contract"] = True
    if cs.lipschitz_c <= 0:
        rep.fail("lipschitz_c", "Lipschitz constant c must be positive")

    nodes = config.grid.nodes().reshape(-1, config.d)
    phi = config.terminal(nodes)
    dist = distance(phi, config.domain)
    if not np.all(np.isfinite(phi)) or np.max(dist) > 0:
        i = int(np.argmax(dist))
        rep.fail("terminal", TERMINAL_MSG, {"x": nodes[i].tolist(), "phi": phi[i].tolist(),
                                            "distance": float(dist[i])})
    else:
        rep.checks["terminal"] = True
    l4 = float(np.sum(np.sum(phi ** 2, axis=1) ** 2) * config.grid.cell_volume)
    rep.checks["terminal_L4"] = l4
    if not np.isfinite(l4):
        rep.fail("terminal_L4", "terminal condition is not in L^4")

    rng = np.random.default_rng(seed)
    t, x, y1, z1 = _random_inputs(config, samples, rng)
    _, _, y2, z2 = _random_inputs(config, samples, rng)
    dy = np.linalg.norm(y1 - y2, axis=1)
    dz = np.linalg.norm((z1 - z2).reshape(samples, -1), axis=1)
    c = cs.lipschitz_c
    for role, fn, bound, zmod in (("f", cs.f, cs.f0, c), ("g", cs.g, cs.g0, cs.alpha),
                                  ("h", cs.h, cs.h0, cs.beta)):
        v1 = _per_sample(fn, t, x, y1, z1).reshape(samples, -1)
        v2 = _per_sample(fn, t, x, y2, z2).reshape(samples, -1)
        b = _per_sample_bound(bound, t, x)
        n1 = np.linalg.norm(v1, axis=1)
        excess = n1 - b
        rep.checks[f"{role}_bound_excess"] = float(np.max(excess))
        if np.max(excess) > tol:
            i = int(np.argmax(excess))
            rep.fail(f"{role}_bound", f"|{role}| exceeds its declared bound {role}0",
                     {"t": float(t[i]), "x": x[i].tolist(), "value": float(n1[i]),
                      "bound": float(b[i])})
        lip = np.linalg.norm(v1 - v2, axis=1) - (c * dy + zmod * dz)
        rep.checks[f"{role}_lipschitz_excess"] = float(np.max(lip))
        if np.max(lip) > tol:
            i = int(np.argmax(lip))
            rep.fail(f"{role}_lipschitz", f"{role} violates its declared Lipschitz moduli",
                     {"t": float(t[i]), "x": x[i].tolist(), "excess": float(lip[i])})
    return rep


def require_valid(config: ProblemConfig, samples: int = 200, seed: int = 0) -> ValidationReport:
    rep = validate(config, samples=samples, seed=seed)
    if not rep.ok:
        raise AssumptionError(rep)
    return rep


# ---------------------------------------------------------------------------
# reduction of a general elliptic operator to (1/2) Laplacian form


def transform_to_laplacian(a, Lambda: float, config: ProblemConfig,
                           samples: int = 200, seed: int = 0) -> ProblemConfig:
    """Rewrite ``div(a grad u)`` dynamics as ``(1/2) Laplacian`` dynamics.

    Time is rescaled by ``2 Lambda``: the new horizon is ``2 Lambda T`` and

        f^(t) = f(t / 2L) / 2L
        h^(t) = h(t / 2L) / sqrt(2L)
        g^(t) = (g(t / 2L) + (L I - a(x)) z) / 2L

    with ``L = Lambda``. ``a`` is a constant symmetric matrix or a callable
    ``x -> (P, d, d)``. The Lipschitz moduli of the new set are recomputed
    conservatively; the caller should re-run :func:`validate`.
    """
    d = config.d
    Lam = float(Lambda)
    if Lam <= 0:
        raise ValueError("Lambda must be positive")
    if callable(a):
        a_fn = a
    else:
        a_mat = np.asarray(a, dtype=float).reshape(d, d)
        a_fn = lambda x: np.broadcast_to(a_mat, (x.shape[0], d, d))  # noqa: E731

    rng = np.random.default_rng(seed)
    xs = rng.uniform(-config.grid.L, config.grid.L, size=(samples, d))
    amat = np.asarray(a_fn(xs), dtype=float)
    if not np.allclose(amat, np.swapaxes(amat, -1, -2), atol=1e-12):
        raise ValueError("diffusion matrix a must be symmetric")
    eig = np.linalg.eigvalsh(amat)
    if np.min(eig) <= 0:
        raise ValueError("diffusion matrix a is not uniformly elliptic (lambda <= 0)")
    if np.max(eig) > Lam + 1e-12:
        raise ValueError("ellipticity upper bound Lambda violated by a")
    gap_norm = float(np.max(Lam - eig[..., 0]))  # operator norm of Lambda I - a

    cs = config.coefficients
    s = 2.0 * Lam
    rz = config.sample_radius

    def f_hat(t, x, y, z):
        return cs.f(t / s, x, y, z) / s

    def h_hat(t, x, y, z):
        return cs.h(t / s, x, y, z) / np.sqrt(s)

    def g_hat(t, x, y, z):
        gamma = Lam * np.eye(d) - np.asarray(a_fn(x), dtype=float)
        return (cs.g(t / s, x, y, z) + z @ gamma) / s

    def f0_hat(t, x):
        return cs.f0(t / s, x) / s

    def h0_hat(t, x):
        return cs.h0(t / s, x) / np.sqrt(s)

    def g0_hat(t, x):
        # the (Lambda I - a) z part is unbounded in z; this bound holds on the
        # sampling range |z| <= sample_radius only
        return (cs.g0(t / s, x) + gap_norm * rz) / s

    new_cs = CoefficientSet(
        f=f_hat, g=g_hat, h=h_hat, f0=f0_hat, g0=g0_hat, h0=h0_hat,
        lipschitz_c=cs.lipschitz_c * max(1.0 / s, 1.0 / np.sqrt(s)),
        alpha=(cs.alpha + gap_norm) / s,
        beta=cs.beta / np.sqrt(s),
        l=cs.l,
        names={**cs.names, "transform": {"Lambda": Lam, "gap_norm": gap_norm}},
    )
    return replace(config, T=s * config.T, coefficients=new_cs)

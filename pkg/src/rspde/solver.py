"""Backward time stepping of the penalized SPDE on a periodic grid.

Fields are stored node-major: ``u[j, i1, ..., id, c]`` with ``j`` the time
index, ``i*`` the spatial indices and ``c`` the value component. A step from
``t_{j+1}`` to ``t_j`` is

    w   = S[u_{j+1}] + dt f + dt div_h g + h dW_j
    u_j = prox(w, n dt)

with ``S`` one implicit step of ``1/2 Delta_h`` (diagonalised by the FFT) and
``prox`` the exact resolvent of ``v -> n (v - pi(v))``. Coefficients are
evaluated at ``t_{j+1}`` with ``u_{j+1}`` and its centred gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .coefficients import GridSpec, ProblemConfig
from .domain import ConvexDomain, boundary_distance, project
from .paths import BrownianPath

PROX_TOL = 1e-12
SPOT_CHECK_STRIDE = 100


class NumericalAbort(FloatingPointError):
    """A step produced non-finite values or failed its self-check."""

    def __init__(self, message: str, step: int | None = None, node=None):
        super().__init__(message)
        self.step = step
        self.node = node


class StabilityError(ValueError):
    """The explicit part of the scheme violates its step-size guard."""


def implicit_penalty_resolve(w, lam: float, D: ConvexDomain) -> np.ndarray:
    """Solve ``v + lam (v - pi(v)) = w`` for ``v``.

    Along the normal segment through ``w`` the projection is constant, so
    ``v = pi(w) + (w - pi(w)) / (1 + lam)``; points of the closure are
    returned unchanged.
    """
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    w = np.asarray(w, dtype=float)
    p = project(w, D)
    return p + (w - p) / (1.0 + lam)


def check_resolve(v, w, lam: float, D: ConvexDomain, tol: float = PROX_TOL) -> float:
    """Back-substitute into the resolvent equation; returns the max defect."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    lhs = v + lam * (v - project(v, D))
    scale = np.maximum(1.0, np.linalg.norm(w, axis=-1))
    err = float(np.max(np.linalg.norm(lhs - w, axis=-1) / scale, initial=0.0))
    if err > tol:
        raise NumericalAbort(f"penalty resolve defect {err:.3e} exceeds {tol:.0e}")
    return err


# ---------------------------------------------------------------------------
# spatial operators


def _spatial_axes(grid: GridSpec, lead: int) -> tuple[int, ...]:
    return tuple(range(lead, lead + grid.d))


def laplacian_symbol(grid: GridSpec) -> np.ndarray:
    """Eigenvalues of the periodic 2nd-order difference Laplacian (rfft layout)."""
    lam = np.zeros([grid.M] * (grid.d - 1) + [grid.M // 2 + 1])
    for a in range(grid.d):
        m = np.arange(grid.M // 2 + 1) if a == grid.d - 1 else np.arange(grid.M)
        s = -4.0 / grid.dx ** 2 * np.sin(np.pi * m / grid.M) ** 2
        shape = [1] * grid.d
        shape[a] = m.size
        lam = lam + s.reshape(shape)
    return lam


def heat_step(u: np.ndarray, dt: float, grid: GridSpec, symbol=None) -> np.ndarray:
    """One implicit Euler step of ``du/dt = 1/2 Delta_h u``.

    ``u`` has the spatial axes first and a trailing component axis. The
    operator fixes constants exactly: the value at the first node is
    subtracted before the transform and added back afterwards.
    """
    if symbol is None:
        symbol = laplacian_symbol(grid)
    axes = _spatial_axes(grid, 0)
    ref = u[(0,) * grid.d]
    denom = (1.0 - 0.5 * dt * symbol)[..., None]
    spec = np.fft.rfftn(u - ref, axes=axes)
    return ref + np.fft.irfftn(spec / denom, s=grid.shape, axes=axes)


def gradient(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Centred differences; ``(..., M^d, k) -> (..., M^d, k, d)``.

    Spatial axes are taken to be the ``d`` axes preceding the component axis.
    """
    lead = u.ndim - 1 - grid.d
    parts = []
    for a in range(grid.d):
        ax = lead + a
        parts.append((np.roll(u, -1, axis=ax) - np.roll(u, 1, axis=ax)) / (2.0 * grid.dx))
    return np.stack(parts, axis=-1)


def divergence(g: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Centred divergence of a ``(..., M^d, k, d)`` field over its last axis."""
    lead = g.ndim - 2 - grid.d
    out = np.zeros(g.shape[:-1])
    for a in range(grid.d):
        ax = lead + a
        ga = g[..., a]
        out += (np.roll(ga, -1, axis=ax) - np.roll(ga, 1, axis=ax)) / (2.0 * grid.dx)
    return out


# ---------------------------------------------------------------------------
# solution containers


@dataclass(eq=False)
class SolutionField:
    values: np.ndarray      # (N+1, M^d, k)
    gradient: np.ndarray    # (N+1, M^d, k, d)
    n: float
    W: BrownianPath
    grid: GridSpec
    T: float
    domain: ConvexDomain
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.T / self.grid.N

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.grid.N + 1)


@dataclass(eq=False)
class ReflectionMeasure:
    """Masses ``-n dt (u_j - pi(u_j)) |cell|`` per time node and cell."""

    mass: np.ndarray        # (N+1, M^d, k); row N is zero
    n: float
    grid: GridSpec

    def tv_components(self) -> np.ndarray:
        """Total variation of each component measure."""
        return np.abs(self.mass).reshape(-1, self.mass.shape[-1]).sum(axis=0)

    def total_variation(self) -> float:
        """Total variation of the vector measure (Euclidean norm per cell)."""
        return float(np.linalg.norm(self.mass, axis=-1).sum())


@dataclass(eq=False)
class KDensity:
    """The integrand ``-n (u - pi(u))`` on the time-space grid."""

    values: np.ndarray      # (N+1, M^d, k)
    n: float
    grid: GridSpec


# ---------------------------------------------------------------------------
# stepping


def check_stability(config: ProblemConfig) -> None:
    if config.dt * config.coefficients.lipschitz_c > 0.5:
        raise StabilityError(
            f"dt * lipschitz_c = {config.dt * config.coefficients.lipschitz_c:.3g} exceeds 1/2")


def _abort_if_nonfinite(w: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(w)
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
        raise NumericalAbort(f"non-finite value at step {step}, node {node}", step, node)


def backward_step(u_next: np.ndarray, dW, n: float, config: ProblemConfig, t_next: float,
                  step: int = -1, symbol=None, nodes=None, check: bool = True):
    """Advance from ``t_{j+1}`` to ``t_j``.

    Returns ``(u_j, w)`` with ``w`` the pre-penalty state.
    """
    grid, co = config.grid, config.coefficients
    dt = config.dt
    if nodes is None:
        nodes = grid.nodes()
    P = int(np.prod(grid.shape))
    k, d = config.k, config.d
    x = nodes.reshape(P, d)
    y = u_next.reshape(P, k)
    z_field = gradient(u_next, grid)
    z = z_field.reshape(P, k, d)

    w = heat_step(u_next, dt, grid, symbol)
    fv = co.f(t_next, x, y, z).reshape(u_next.shape)
    gv = co.g(t_next, x, y, z).reshape(grid.shape + (k, d))
    hv = co.h(t_next, x, y, z).reshape(grid.shape + (k, config.l))
    w = w + dt * fv + dt * divergence(gv, grid) + hv @ np.asarray(dW, dtype=float)
    _abort_if_nonfinite(w, step)

    u = implicit_penalty_resolve(w, n * dt, config.domain)
    if check:
        idx = np.arange(0, P, SPOT_CHECK_STRIDE)
        try:
            check_resolve(u.reshape(P, k)[idx], w.reshape(P, k)[idx], n * dt, config.domain)
        except NumericalAbort as exc:
            raise NumericalAbort(f"{exc} at step {step}", step) from None
    return u, w


def solve(config: ProblemConfig, W: BrownianPath, n: float, check: bool = True):
    """Run the scheme from ``u(T) = Phi`` down to ``t = 0``.

    Returns ``(SolutionField, ReflectionMeasure, KDensity)``.
    """
    grid = config.grid
    if W.N != grid.N or abs(W.T - config.T) > 1e-12 * config.T:
        raise ValueError("W path does not live on the solver's time grid")
    if W.dim != config.l:
        raise ValueError(f"W has dimension {W.dim}, coefficients expect l={config.l}")
    check_stability(config)
    N, k = grid.N, config.k
    nodes = grid.nodes()
    symbol = laplacian_symbol(grid)
    times = config.times()
    dW = W.increments()

    u = np.empty((N + 1,) + grid.shape + (k,))
    P = int(np.prod(grid.shape))
    u[N] = config.terminal(nodes.reshape(P, config.d)).reshape(grid.shape + (k,))
    _abort_if_nonfinite(u[N], N)
    for j in range(N - 1, -1, -1):
        u[j], _ = backward_step(u[j + 1], dW[j], n, config, times[j + 1], step=j,
                                symbol=symbol, nodes=nodes, check=check)

    density = -n * (u - project(u, config.domain))
    mass = density * config.dt * grid.cell_volume
    mass[N] = 0.0
    meta = {"n": n, "seed": W.seed, "M": grid.M, "N": N, "L": grid.L, "d": grid.d}
    sol = SolutionField(u, gradient(u, grid), n, W, grid, config.T, config.domain, meta)
    return sol, ReflectionMeasure(mass, n, grid), KDensity(density, n, grid)


# ---------------------------------------------------------------------------
# diagnostics and export


@dataclass
class Localization:
    fraction: float
    total_mass: float
    zero_mass: bool


def boundary_localization(sol: SolutionField, measure: ReflectionMeasure,
                          delta: float) -> Localization:
    """Share of the measure's mass on cells farther than ``delta`` from the boundary."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    weights = np.linalg.norm(measure.mass, axis=-1)
    total = float(weights.sum())
    if total == 0.0:
        return Localization(0.0, 0.0, True)
    far = boundary_distance(sol.values, sol.domain) > delta
    return Localization(float(weights[far].sum() / total), total, False)


def write_snapshots(sol: SolutionField, path, steps=None, extra: dict | None = None) -> None:
    """CSV rows ``t, x0.., u0..`` for the chosen time indices."""
    grid = sol.grid
    steps = range(grid.N + 1) if steps is None else steps
    times = sol.times()
    nodes = grid.nodes().reshape(-1, grid.d)
    meta = dict(sol.meta)
    meta.update(extra or {})
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh)
        k = sol.values.shape[-1]
        w.writerow(["t"] + [f"x{a}" for a in range(grid.d)] + [f"u{c}" for c in range(k)])
        for j in steps:
            vals = sol.values[j].reshape(-1, k)
            for xi, ui in zip(nodes, vals):
                w.writerow([repr(float(times[j]))] + [repr(float(v)) for v in xi]
                           + [repr(float(v)) for v in ui])

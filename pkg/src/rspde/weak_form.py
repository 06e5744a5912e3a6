"""Variational checks of a solved field against smooth test functions.

Test functions are ``phi(s, x) = theta(s) psi(x)`` with ``psi`` the compact
polynomial bump ``(1 - |x - c|^2 / R^2)^m`` (``C^{m-1}``, exact gradient and
Laplacian) and ``theta`` a polynomial. Residuals are returned per value
component, i.e. with ``phi`` placed in each coordinate of R^k in turn.

The random test function of a translation flow is ``psi(x - (B_s - B_t))``;
its Jacobian is identically 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial, legendre

from .coefficients import CoefficientSet, GridSpec
from .paths import BrownianPath
from .solver import ReflectionMeasure, SolutionField

MODES = ("decomposition", "pathwise")


class SupportError(ValueError):
    """The test function's support reaches the edge of the torus."""


@dataclass(frozen=True, eq=False)
class TestFunction:
    center: np.ndarray
    radius: float
    power: int = 4
    time_coeffs: tuple = (1.0,)

    __test__ = False  # not a pytest class

    @property
    def theta(self) -> Polynomial:
        return Polynomial(self.time_coeffs)

    def check_support(self, grid: GridSpec) -> None:
        c = np.broadcast_to(np.asarray(self.center, dtype=float), (grid.d,))
        if np.any(np.abs(c) + self.radius >= grid.L):
            raise SupportError("test function support touches the torus edge")

    def _q(self, x):
        c = np.asarray(self.center, dtype=float)
        rel = x - c
        r2 = np.sum(rel ** 2, axis=-1) / self.radius ** 2
        return rel, r2, np.clip(1.0 - r2, 0.0, None)

    def psi(self, x) -> np.ndarray:
        _, _, q = self._q(np.asarray(x, dtype=float))
        return q ** self.power

    def grad(self, x) -> np.ndarray:
        rel, _, q = self._q(np.asarray(x, dtype=float))
        m = self.power
        return (-2.0 * m / self.radius ** 2 * q ** (m - 1))[..., None] * rel

    def laplacian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rel, r2, q = self._q(x)
        m, d = self.power, x.shape[-1]
        inside = r2 < 1.0
        val = -2.0 * m / self.radius ** 2 * (d * q ** (m - 1) - 2.0 * (m - 1) * r2 * q ** (m - 2))
        return np.where(inside, val, 0.0)


def _wrap(x, grid: GridSpec):
    return (x + grid.L) % (2.0 * grid.L) - grid.L


def _start_index(sol: SolutionField, t: float) -> int:
    i = int(round(t / sol.dt))
    if abs(i * sol.dt - t) > 1e-12 * max(sol.T, 1.0) or not 0 <= i <= sol.grid.N:
        raise ValueError(f"window start {t!r} is not a grid node")
    return i


def _assemble_rest(sol: SolutionField, measure: ReflectionMeasure, co: CoefficientSet,
                   terminal, W: BrownianPath, i: int, phi, gphi) -> np.ndarray:
    """All terms except the time-derivative pairing, per component.

    ``phi`` is ``(nodes, M^d)`` and ``gphi`` is ``(nodes, M^d, d)`` on the
    window ``[t_i, T]``. Returns ``1/2 (grad u, grad phi) + (u_t, phi_t)
    - (Phi, phi_T) - (f, phi) + (g, grad phi) - (h, phi) dW - <phi, nu>``.
    """
    grid = sol.grid
    N, d, k = grid.N, grid.d, sol.values.shape[-1]
    vol = grid.cell_volume
    dt = sol.dt
    P = int(np.prod(grid.shape))
    x = grid.nodes().reshape(P, d)
    times = sol.times()
    nodes = N + 1 - i
    phi = phi.reshape(nodes, P)
    gphi = gphi.reshape(nodes, P, d)

    wts = np.full(nodes, dt)
    wts[0] = wts[-1] = 0.5 * dt
    if nodes == 1:
        wts[:] = 0.0
    u = sol.values[i:].reshape(nodes, P, k)
    gu = sol.gradient[i:].reshape(nodes, P, k, d)

    grad_term = 0.5 * np.einsum("m,mpkd,mpd->k", wts, gu, gphi) * vol
    ends = (np.einsum("pk,p->k", u[0], phi[0])
            - np.einsum("pk,p->k", terminal(x), phi[-1])) * vol
    f_term = np.zeros(k)
    g_term = np.zeros(k)
    eta = np.zeros((nodes, k, co.l))
    for m in range(nodes):
        j = i + m
        y, z = u[m], gu[m]
        if wts[m]:
            f_term += wts[m] * np.einsum("pk,p->k", co.f(times[j], x, y, z), phi[m]) * vol
            g_term += wts[m] * np.einsum("pkd,pd->k", co.g(times[j], x, y, z), gphi[m]) * vol
        eta[m] = np.einsum("pkl,p->kl", co.h(times[j], x, y, z), phi[m]) * vol
    dW = np.diff(W.values[i:], axis=0)
    h_term = np.einsum("mkl,ml->k", eta[1:], dW)
    mass = measure.mass[i:].reshape(nodes, P, k)
    nu_term = np.einsum("mpk,mp->k", mass, phi)
    return grad_term + ends - f_term + g_term - h_term - nu_term


def weak_residual(sol: SolutionField, measure: ReflectionMeasure, phi: TestFunction,
                  W: BrownianPath, co: CoefficientSet, terminal, t: float = 0.0,
                  gauss_points: int | None = None) -> np.ndarray:
    """Signed defect of the variational identity on ``[t, T]`` per component.

    The time-derivative term treats ``u`` as piecewise linear in time and
    integrates it against ``theta'`` by Gauss-Legendre quadrature, exact for
    polynomial ``theta``.
    """
    grid = sol.grid
    phi.check_support(grid)
    i = _start_index(sol, t)
    d = grid.d
    P = int(np.prod(grid.shape))
    x = grid.nodes().reshape(P, d)
    times = sol.times()[i:]
    theta = phi.theta
    dtheta = theta.deriv()
    psi = phi.psi(x)
    gpsi = phi.grad(x)
    th = theta(times)
    phi_nodes = th[:, None] * psi[None]
    gphi_nodes = th[:, None, None] * gpsi[None]
    rest = _assemble_rest(sol, measure, co, terminal, W, i, phi_nodes, gphi_nodes)

    npts = gauss_points or max(2, (dtheta.degree() + 3) // 2 + 1)
    gx, gw = legendre.leggauss(npts)
    lam = 0.5 * (gx + 1.0)
    a = np.zeros(times.size)
    for m in range(times.size - 1):
        h = times[m + 1] - times[m]
        s = times[m] + h * lam
        vals = dtheta(s) * 0.5 * h * gw
        a[m] += np.sum(vals * (1.0 - lam))
        a[m + 1] += np.sum(vals * lam)
    u = sol.values[i:].reshape(times.size, P, -1)
    dt_term = np.einsum("m,mpk,p->k", a, u, psi) * grid.cell_volume
    return dt_term + rest


def random_test_function(phi: TestFunction, B, t: float, grid: GridSpec, T: float,
                         temporal: bool = False):
    """``psi(x - (B_s - B_t))`` on the grid for every node ``s >= t``.

    Returns ``(values, gradient, laplacian)`` with shapes ``(nodes, M^d)``,
    ``(nodes, M^d, d)`` and ``(nodes, M^d)``. With ``temporal`` the values
    and gradient are multiplied by ``theta(s)``.
    """
    Bv = B.values if isinstance(B, BrownianPath) else np.asarray(B, dtype=float)
    N = Bv.shape[0] - 1
    dt = T / N
    i = int(round(t / dt))
    shift = Bv[i:] - Bv[i]
    x = grid.nodes()
    pts = _wrap(x[None] - shift.reshape((-1,) + (1,) * grid.d + (grid.d,)), grid)
    vals, grads, laps = phi.psi(pts), phi.grad(pts), phi.laplacian(pts)
    if temporal:
        th = phi.theta(np.linspace(t, T, N + 1 - i)).reshape((-1,) + (1,) * grid.d)
        vals = vals * th
        grads = grads * th[..., None]
    return vals, grads, laps


def decomposition_defect(phi: TestFunction, B, t: float, T: float, x) -> np.ndarray:
    """Defect of the semimartingale decomposition of ``psi(x - (B_s - B_t))``.

    ``B`` is ``(N+1, P, d)`` (or a single path), ``x`` is ``(Q, d)``. The
    drift uses left-point Riemann sums and the martingale part left-point
    Ito sums. Returns ``max_s |defect|`` over ``s`` and ``x``, per path.
    """
    Bv = B.values if isinstance(B, BrownianPath) else np.asarray(B, dtype=float)
    if Bv.ndim == 2:
        Bv = Bv[:, None, :]
    N = Bv.shape[0] - 1
    dt = T / N
    i = int(round(t / dt))
    shift = Bv[i:] - Bv[i]                                 # (nodes, P, d)
    x = np.asarray(x, dtype=float)
    pts = x[None, None] - shift[:, :, None, :]             # (nodes, P, Q, d)
    vals = phi.psi(pts)
    lap = phi.laplacian(pts)
    grad = phi.grad(pts)
    dB = np.diff(shift, axis=0)                            # (nodes-1, P, d)
    drift = np.concatenate([np.zeros((1,) + vals.shape[1:]),
                            np.cumsum(0.5 * lap[:-1] * dt, axis=0)])
    mart = np.concatenate([np.zeros((1,) + vals.shape[1:]),
                           np.cumsum(np.einsum("mpqd,mpd->mpq", grad[:-1], dB), axis=0)])
    defect = vals - (phi.psi(x)[None, None] + drift - mart)
    return np.max(np.abs(defect), axis=(0, 2))


def decomposition_residual(phi: TestFunction, B, t: float, T: float, x) -> float:
    """Largest decomposition defect over paths, nodes and points."""
    return float(np.max(decomposition_defect(phi, B, t, T, x)))


def dual_residual(sol: SolutionField, measure: ReflectionMeasure, phi: TestFunction,
                  B, W: BrownianPath, co: CoefficientSet, terminal, t: float = 0.0,
                  mode: str = "decomposition") -> np.ndarray:
    """Defect of the variational identity tested with the random test function.

    The pairing ``int (u_r, d phi_t(r))`` is discretised either through the
    decomposition (``1/2 (u_r, Lap phi_t) dr - (u_r, grad phi_t) . dB_r``,
    left points) or pathwise as ``sum (u_r, phi_t(r+1) - phi_t(r))``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    grid = sol.grid
    phi.check_support(grid)
    i = _start_index(sol, t)
    Bv = B.values if isinstance(B, BrownianPath) else np.asarray(B, dtype=float)
    if Bv.shape[0] != grid.N + 1:
        raise ValueError("B path and field have different time grids")
    vals, grads, laps = random_test_function(phi, Bv, t, grid, sol.T)
    rest = _assemble_rest(sol, measure, co, terminal, W, i, vals, grads)

    nodes = grid.N + 1 - i
    P = int(np.prod(grid.shape))
    u = sol.values[i:].reshape(nodes, P, -1)
    vals = vals.reshape(nodes, P)
    vol = grid.cell_volume
    if mode == "pathwise":
        dphi = np.diff(vals, axis=0)
    else:
        dB = np.diff(Bv[i:], axis=0)
        dphi = (0.5 * laps.reshape(nodes, P)[:-1] * sol.dt
                - np.einsum("mpd,md->mp", grads.reshape(nodes, P, -1)[:-1], dB))
    dphi_term = np.einsum("mpk,mp->k", u[:-1], dphi) * vol
    return dphi_term + rest


def write_residual_table(rows, path, meta: dict | None = None) -> None:
    """CSV of residual rows (dicts with a common key set)."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key}={val}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({key: (repr(v) if isinstance(v, float) else v) for key, v in r.items()})

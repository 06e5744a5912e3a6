"""Brownian paths, the translation flow, and stochastic quadratures.

Quadrature helpers take node values with the time axis first. Increments
are ``X[j+1] - X[j]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

GENERATOR = "PCG64"


class OffGridError(ValueError):
    """A time argument does not fall on the path's grid."""


class CalibrationError(RuntimeError):
    """No convention for the forward-backward integral converged."""


@dataclass(frozen=True, eq=False)
class BrownianPath:
    dim: int
    times: np.ndarray
    values: np.ndarray  # (N+1, dim), values[0] == 0
    seed: int | None = None
    generator: str = GENERATOR

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return self.T / self.N

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a node."""
        j = int(round(t / self.dt))
        if j < 0 or j > self.N or abs(self.times[j] - t) > 1e-12 * max(self.T, 1.0):
            raise OffGridError(f"time {t!r} is not on the path grid")
        return j

    def coarsen(self, factor: int) -> "BrownianPath":
        """The same path observed every ``factor`` steps."""
        if self.N % factor:
            raise ValueError("factor must divide the number of steps")
        return BrownianPath(self.dim, self.times[::factor], self.values[::factor],
                            self.seed, self.generator)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed} generator={self.generator} N={self.N} T={self.T}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"b{i}" for i in range(self.dim)])
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _check(T: float, N: int) -> None:
    if N < 1:
        raise ValueError("need at least one time step")
    if not T > 0:
        raise ValueError("horizon must be positive")


def sample_path(T: float, N: int, dim: int, seed: int) -> BrownianPath:
    """Standard Brownian motion on ``N`` uniform steps of ``[0, T]``."""
    _check(T, N)
    incr = _rng(seed).standard_normal((N, dim)) * np.sqrt(T / N)
    values = np.concatenate([np.zeros((1, dim)), np.cumsum(incr, axis=0)])
    return BrownianPath(dim, np.linspace(0.0, T, N + 1), values, seed)


def sample_paths(T: float, N: int, dim: int, n_paths: int, seed: int) -> np.ndarray:
    """Independent Brownian paths as one array of shape ``(N+1, n_paths, dim)``."""
    _check(T, N)
    incr = _rng(seed).standard_normal((N, n_paths, dim)) * np.sqrt(T / N)
    return np.concatenate([np.zeros((1, n_paths, dim)), np.cumsum(incr, axis=0)])


def flow(x, t: float, s: float, path: BrownianPath) -> np.ndarray:
    """Position at time ``s`` of the translation flow started from ``x`` at ``t``."""
    i, j = path.index(t), path.index(s)
    if j < i:
        raise ValueError("flow requires t <= s")
    return np.asarray(x, dtype=float) + (path.values[j] - path.values[i])


def inverse_flow(y, t: float, s: float, path: BrownianPath) -> np.ndarray:
    i, j = path.index(t), path.index(s)
    if j < i:
        raise ValueError("inverse_flow requires t <= s")
    return np.asarray(y, dtype=float) - (path.values[j] - path.values[i])


def _window(path: BrownianPath, s: float, t: float | None) -> tuple[int, int]:
    i = path.index(s)
    j = path.N if t is None else path.index(t)
    if j < i:
        raise ValueError("window end precedes its start")
    return i, j


def backward_ito_w(eta, path: BrownianPath, s: float = 0.0, t: float | None = None) -> np.ndarray:
    """Backward Ito sum ``sum_j eta[j+1] . (W[j+1] - W[j])`` over ``[s, t]``.

    ``eta`` holds one value per node in the window (time axis first); its
    last axis is contracted with the ``l``-dimensional increments.
    """
    eta = np.asarray(eta, dtype=float)
    i, j = _window(path, s, t)
    if eta.shape[0] != j - i + 1:
        raise ValueError(f"integrand has {eta.shape[0]} nodes, window has {j - i + 1}")
    dw = np.diff(path.values[i:j + 1], axis=0)
    return np.einsum("j...l,jl->...", eta[1:], dw)


def forward_ito(eta, increments) -> np.ndarray:
    """Left-point sum ``sum_j <eta[j], dX[j]>`` (last axes contracted)."""
    eta = np.asarray(eta, dtype=float)
    return np.sum(np.sum(eta[:-1] * increments, axis=-1), axis=0)


DEFAULT_KAPPA = 2


def star_integral(L_nodes, B_nodes, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """Forward-backward integral of ``L(r, B_r)`` against ``B``.

    The forward leg is the left-point sum; the backward leg runs against the
    time-reversed increments with the right endpoint weighted by ``kappa``::

        forward  =  sum_j <L_j, dB_j>
        backward = -sum_j <L_j + kappa (L_{j+1} - L_j), dB_j>

    Their sum is ``-kappa * sum_j <L_{j+1} - L_j, dB_j>``, which tends to
    ``-kappa * int div L(r, B_r) dr`` for smooth ``L``.

    ``L_nodes`` and ``B_nodes`` have the time axis first and must broadcast;
    the last axis (length d) is contracted.
    """
    L = np.asarray(L_nodes, dtype=float)
    B = np.asarray(B_nodes, dtype=float)
    if L.shape[0] != B.shape[0]:
        raise ValueError("integrand and path have different node counts")
    dB = np.diff(B, axis=0)
    forward = np.sum(np.sum(L[:-1] * dB, axis=-1), axis=0)
    backward = -np.sum(np.sum((L[:-1] + kappa * (L[1:] - L[:-1])) * dB, axis=-1), axis=0)
    return forward + backward


def trapezoid(values, dt: float) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return dt * (0.5 * v[0] + np.sum(v[1:-1], axis=0) + 0.5 * v[-1])


@dataclass
class CalibrationReport:
    kappa: float
    dts: list[float]
    residuals: dict[float, list[float]]
    slopes: dict[float, float]
    slope_stderr: dict[float, float]
    n_paths: int
    seed: int

    def as_rows(self):
        for kap, res in self.residuals.items():
            for dt, r in zip(self.dts, res):
                yield {"kappa": kap, "dt": dt, "mean_abs_residual": r,
                       "slope": self.slopes[kap], "slope_stderr": self.slope_stderr[kap]}


def bump_field(d: int, width: float = 0.7):
    """Smooth test field ``L(x) = exp(-|x|^2 / 2w^2) e`` and its divergence."""
    e = np.ones(d) / np.sqrt(d)

    def L(x):
        w = np.exp(-0.5 * np.sum(x ** 2, axis=-1) / width ** 2)
        return w[..., None] * e

    def div(x):
        w = np.exp(-0.5 * np.sum(x ** 2, axis=-1) / width ** 2)
        return -w * np.sum(x * e, axis=-1) / width ** 2

    return L, div


def star_residuals(L, divL, T: float, N_levels, n_paths: int, seed: int, kappa: float,
                   dim: int = 1) -> np.ndarray:
    """Per-path residual ``|star - (-2 int div L dr)|`` at each refinement level.

    Paths are simulated on the finest level and subsampled, so every level
    sees the same Brownian paths. Returns shape ``(levels, n_paths)``.
    """
    N_levels = list(N_levels)
    Nmax = max(N_levels)
    if any(Nmax % n for n in N_levels):
        raise ValueError("refinement levels must divide the finest one")
    B = sample_paths(T, Nmax, dim, n_paths, seed)
    out = []
    for n in N_levels:
        Bn = B[:: Nmax // n]
        star = star_integral(L(Bn), Bn, kappa)
        exact = -2.0 * trapezoid(divL(Bn), T / n)
        out.append(np.abs(star - exact))
    return np.array(out)


def loglog_slope(dts, values) -> tuple[float, float]:
    res = stats.linregress(np.log(dts), np.log(values))
    return float(res.slope), float(res.stderr)


def calibrate_star_convention(L=None, divL=None, T: float = 1.0, levels=(16, 64, 256, 1024),
                              n_paths: int = 100, seed: int = 0, kappas=(1, 2),
                              min_slope: float = 0.4, dim: int = 1) -> CalibrationReport:
    """Pick the backward-leg weight that reproduces ``-2 int div L dr``.

    For each candidate, mean residuals over ``n_paths`` are computed at each
    refinement level and a log-log slope against ``dt`` is fitted. Among
    candidates with slope at least ``min_slope`` the one with the smallest
    finest-level residual wins.
    """
    if L is None:
        L, divL = bump_field(dim)
    levels = sorted(levels)
    dts = [T / n for n in levels]
    residuals, slopes, errs = {}, {}, {}
    for kap in kappas:
        r = star_residuals(L, divL, T, levels, n_paths, seed, kap, dim)
        mean = r.mean(axis=1)
        residuals[kap] = mean.tolist()
        if np.all(mean > 0):
            slopes[kap], errs[kap] = loglog_slope(dts, mean)
        else:
            slopes[kap], errs[kap] = float("inf"), 0.0
    ok = [k for k in kappas if slopes[k] >= min_slope]
    if not ok:
        raise CalibrationError(f"no convention converged: slopes {slopes}")
    best = min(ok, key=lambda k: residuals[k][-1])
    return CalibrationReport(kappa=float(best), dts=dts, residuals=residuals, slopes=slopes,
                             slope_stderr=errs, n_paths=n_paths, seed=seed)

"""Penalty sweeps and the diagnostics computed from them.

Every estimate of the form ``E E^m[...]`` uses uniformly distributed start
points on the torus (stratified: one point per equal-width bin, in random
order) paired one-to-one with Brownian paths, and is scaled by the torus
volume. Within one seed the same W path, the same B paths and the same start
points are reused for every penalty level.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bdsde import PathTriple, reconstruct
from .coefficients import ProblemConfig
from .domain import distance, inradius
from .paths import DEFAULT_KAPPA, sample_path, sample_paths
from .solver import ReflectionMeasure, SolutionField, boundary_localization, solve
from .weak_form import TestFunction

SWEEP_COLUMNS = (
    "n", "seed", "dist2_integral", "dist2_se", "dist4_sup", "dist4_se", "cauchy_gap",
    "tv_nu", "k_tv", "squared_tv", "duality_gap", "duality_gap_se",
    "boundary_mass_fraction", "max_distance",
)
SLOPE_COLUMNS = ("metric", "slope", "stderr", "ci_low", "ci_high", "levels", "excluded_zero")

# seed offsets so that W, B and x streams never coincide
W_STREAM, B_STREAM, X_STREAM = 0, 1_000_003, 2_000_003


def uniform_starts(grid, size: int, seed: int) -> np.ndarray:
    """Stratified uniform points on ``[-L, L)^d``, shape ``(size, d)``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cols = []
    for _ in range(grid.d):
        u = (np.arange(size) + rng.uniform(size=size)) / size
        cols.append(rng.permutation(u))
    return -grid.L + 2.0 * grid.L * np.stack(cols, axis=-1)


def _trap(v: np.ndarray, dt: float) -> np.ndarray:
    if v.shape[0] < 2:
        return np.zeros(v.shape[1:])
    return dt * (0.5 * v[0] + v[1:-1].sum(axis=0) + 0.5 * v[-1])


@dataclass
class Estimate:
    value: float
    se: float


def _mc(samples: np.ndarray, volume: float) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size) if samples.size > 1 else 0.0
    return Estimate(volume * float(samples.mean()), volume * float(se))


def distance_moment_from_triple(tr: PathTriple, domain, p: int, volume: float) -> Estimate:
    """``E E^m int d^2 ds`` (p=2) or ``E E^m sup d^4`` (p=4) from one ensemble."""
    dist = distance(tr.Y, domain)
    if p == 2:
        return _mc(_trap(dist ** 2, tr.dt), volume)
    if p == 4:
        return _mc(np.max(dist ** 4, axis=0), volume)
    raise ValueError("p must be 2 or 4")


def distance_moment(sol: SolutionField, B, x, p: int) -> Estimate:
    tr = reconstruct(sol, B, 0.0, x)
    return distance_moment_from_triple(tr, sol.domain, p, sol.grid.volume)


def cauchy_metric(a: SolutionField, b: SolutionField) -> float:
    """``sup_t |u_a - u_b|_2^2 + int |grad u_a - grad u_b|_2^2 dt`` on the grid."""
    if a.grid != b.grid or a.T != b.T:
        raise ValueError("fields live on different grids")
    if not np.array_equal(a.W.values, b.W.values):
        raise ValueError("fields were driven by different W paths")
    vol = a.grid.cell_volume
    du = (a.values - b.values).reshape(a.grid.N + 1, -1)
    dg = (a.gradient - b.gradient).reshape(a.grid.N + 1, -1)
    sup_term = float(np.max(np.sum(du ** 2, axis=1))) * vol
    int_term = float(_trap(np.sum(dg ** 2, axis=1), a.dt)) * vol
    return sup_term + int_term


@dataclass
class RateFit:
    slope: float
    intercept: float
    stderr: float
    ci: tuple[float, float]
    levels: int
    excluded_zero: bool


def fit_rate(ns, values, confidence: float = 0.95) -> RateFit:
    """Least-squares slope of ``log(value)`` against ``log(n)``.

    Zero values are dropped and flagged; at least four positive levels are
    required.
    """
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if ns.size < 4:
        raise ValueError("rate fits need at least four levels")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("metric values must be finite and nonnegative")
    keep = values > 0
    excluded = bool(np.any(~keep))
    if keep.sum() < 4:
        raise ValueError("fewer than four positive levels remain")
    x, y = np.log(ns[keep]), np.log(values[keep])
    res = stats.linregress(x, y)
    q = stats.t.ppf(0.5 + confidence / 2, keep.sum() - 2)
    return RateFit(float(res.slope), float(res.intercept), float(res.stderr),
                   (float(res.slope - q * res.stderr), float(res.slope + q * res.stderr)),
                   int(keep.sum()), excluded)


@dataclass
class DualityResult:
    gap: np.ndarray          # (k,) relative gap per component
    se: np.ndarray           # (k,) standard error of the gap
    lhs: np.ndarray
    rhs: np.ndarray
    degenerate: bool

    @property
    def max_gap(self) -> float:
        return float(np.max(self.gap))


def duality_check(measure: ReflectionMeasure, sol: SolutionField, tr: PathTriple,
                  phi: TestFunction, psi: TestFunction, eps: float = 1e-14,
                  chunk: int = 512) -> DualityResult:
    """Compare both sides of the measure/path duality on one ensemble.

    For path ``p`` with start ``x_p`` the left side is the grid pairing
    ``sum phi(y - (B_s - B_t)) psi(y) nu(s, y)`` and the right side is
    ``|torus| phi(x_p) int psi(x_p + B_s - B_t) dK_s``. Both are averaged
    over the ensemble; ``phi`` and ``psi`` are time independent.
    """
    grid = sol.grid
    i = tr.start
    k = measure.mass.shape[-1]
    nodes, P, _ = tr.Y.shape
    y = grid.nodes().reshape(-1, grid.d)
    mass = measure.mass[i:].reshape(nodes, -1, k)
    G = psi.psi(y)[None, :, None] * mass                      # (nodes, cells, k)
    active_t, active_y = np.nonzero(np.any(G != 0.0, axis=-1))
    if active_t.size == 0:
        z = np.zeros(k)
        return DualityResult(z, z, z, z, True)

    shifts = tr.B                                             # (nodes, P, d)
    lhs_p = np.zeros((P, k))
    G_act = G[active_t, active_y]                             # (A, k)
    L2 = 2.0 * grid.L
    for lo in range(0, P, chunk):
        sl = slice(lo, lo + chunk)
        pts = y[active_y][None] - shifts[active_t, sl].transpose(1, 0, 2)   # (c, A, d)
        pts = (pts + grid.L) % L2 - grid.L
        lhs_p[sl] = np.einsum("ca,ak->ck", phi.psi(pts), G_act)

    X = (tr.X + grid.L) % L2 - grid.L
    integrand = psi.psi(X)[..., None] * tr.k                  # (nodes, P, k)
    rhs_p = grid.volume * phi.psi(tr.x)[:, None] * _trap(integrand, tr.dt)

    lhs, rhs = lhs_p.mean(axis=0), rhs_p.mean(axis=0)
    denom = np.abs(lhs) + np.abs(rhs) + eps
    diff = lhs_p - rhs_p
    se = diff.std(axis=0, ddof=1) / np.sqrt(P) / denom if P > 1 else np.zeros(k)
    return DualityResult(np.abs(lhs - rhs) / denom, se, lhs, rhs, False)


def default_profiles(config: ProblemConfig) -> tuple[TestFunction, TestFunction]:
    """Positive compact bumps covering the forcing region."""
    L = config.grid.L
    c = np.zeros(config.d)
    return TestFunction(c, 0.6 * L, 2), TestFunction(c, 0.5 * L, 2)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepReport:
    rows: list[dict]
    slopes: dict[str, RateFit | None]
    ns: list[float]
    seeds: list[int]
    kappa: float
    meta: dict = field(default_factory=dict)

    def column(self, name: str, seed: int | None = None) -> np.ndarray:
        rows = [r for r in self.rows if seed is None or r["seed"] == seed]
        return np.array([r[name] for r in rows])

    def seed_mean(self, name: str) -> np.ndarray:
        """Mean over seeds of a column, one value per penalty level."""
        return np.array([np.mean([r[name] for r in self.rows if r["n"] == n]) for n in self.ns])

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        header = "".join(f"# {k}={v}\n" for k, v in self.meta.items())
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow([r["n"], r["seed"]] + [repr(float(r[c])) for c in SWEEP_COLUMNS[2:]])
        with open(os.path.join(out_dir, "slopes.csv"), "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(SLOPE_COLUMNS)
            for name, fit in self.slopes.items():
                if fit is None:
                    w.writerow([name, "", "", "", "", "", ""])
                else:
                    w.writerow([name, repr(fit.slope), repr(fit.stderr), repr(fit.ci[0]),
                                repr(fit.ci[1]), fit.levels, int(fit.excluded_zero)])


def _cell(config, sol, measure, B, x, phi, psi, delta):
    tr = reconstruct(sol, B, 0.0, x)
    vol = config.grid.volume
    d2 = distance_moment_from_triple(tr, config.domain, 2, vol)
    d4 = distance_moment_from_triple(tr, config.domain, 4, vol)
    dist = distance(tr.Y, config.domain)
    n_int = sol.n * _trap(dist, tr.dt)
    k_tv = np.linalg.norm(np.diff(tr.K, axis=0), axis=-1).sum(axis=0)
    dual = duality_check(measure, sol, tr, phi, psi)
    loc = boundary_localization(sol, measure, delta)
    return {
        "dist2_integral": d2.value, "dist2_se": d2.se,
        "dist4_sup": d4.value, "dist4_se": d4.se,
        "tv_nu": measure.total_variation(),
        "k_tv": vol * float(k_tv.mean()),
        "squared_tv": vol * float((n_int ** 2).mean()),
        "duality_gap": dual.max_gap,
        "duality_gap_se": float(dual.se[np.argmax(dual.gap)]),
        "boundary_mass_fraction": loc.fraction,
        "max_distance": float(distance(sol.values, config.domain).max()),
    }


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("RSPDE_WORKERS", "1")))


def penalty_sweep(config: ProblemConfig, ns, seeds, n_paths: int = 2000,
                  kappa: float = DEFAULT_KAPPA, workers: int | None = None,
                  profiles=None, delta_fraction: float = 0.05) -> SweepReport:
    """Solve for every ``(n, seed)`` with one shared W path per seed.

    ``n_paths`` Brownian paths, each paired with one stratified uniform
    start point, are shared by all levels of a seed. Cauchy gaps compare
    ``u^n`` with ``u^{2n}``; the extra level ``2 max(ns)`` is solved for that
    purpose only.
    """
    ns = [float(n) for n in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("penalty levels must be strictly increasing")
    seeds = [int(s) for s in seeds]
    grid = config.grid
    phi, psi = profiles or default_profiles(config)
    delta = delta_fraction * inradius(config.domain)
    levels = sorted(set(ns) | {2.0 * n for n in ns})

    def run_seed(seed):
        W = sample_path(config.T, grid.N, config.l, W_STREAM + seed)
        B = sample_paths(config.T, grid.N, config.d, n_paths, B_STREAM + seed)
        x = uniform_starts(grid, n_paths, X_STREAM + seed)
        sols = {n: solve(config, W, n) for n in levels}
        rows = []
        for n in ns:
            sol, meas, _ = sols[n]
            row = {"n": n, "seed": seed}
            row.update(_cell(config, sol, meas, B, x, phi, psi, delta))
            row["cauchy_gap"] = cauchy_metric(sol, sols[2.0 * n][0])
            rows.append(row)
        return rows

    with ThreadPoolExecutor(_workers(workers)) as pool:
        per_seed = list(pool.map(run_seed, seeds))
    rows = sorted((r for rs in per_seed for r in rs), key=lambda r: (r["seed"], r["n"]))

    report = SweepReport(rows, {}, ns, seeds, kappa,
                         meta={"M": grid.M, "N": grid.N, "L": grid.L, "d": grid.d,
                               "T": config.T, "seeds": " ".join(map(str, seeds)),
                               "kappa": kappa, "n_paths": n_paths, "generator": "PCG64"})
    for name in ("dist2_integral", "dist4_sup", "cauchy_gap", "tv_nu", "squared_tv", "k_tv"):
        try:
            report.slopes[name] = fit_rate(ns, report.seed_mean(name))
        except ValueError:
            report.slopes[name] = None
    return report

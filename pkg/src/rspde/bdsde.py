"""The triple (Y, Z, K) along translation-flow paths of a solved field.

For a start ``(t_i, x)`` and a Brownian path ``B`` the flow position at node
``j >= i`` is ``X_j = x + B_j - B_i`` (wrapped onto the torus). Then

    Y_j = u(t_j, X_j),   Z_j = grad u(t_j, X_j),   dK/ds = -n (Y - pi(Y))

with off-grid values obtained by periodic multilinear interpolation. Arrays
carry the time axis first and a path axis second.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, GridSpec
from .domain import ConvexDomain, distance, project, sample_inside
from .paths import BrownianPath, star_integral, DEFAULT_KAPPA
from .solver import SolutionField

# Weight of the forward-backward integral of g in the residual. The solver's
# drift contributes +int div g dr along the flow, and the forward-backward
# integral equals -2 int div g dr, hence -1/2.
STAR_WEIGHT = -0.5

SNAP_TOL = 1e-9


class GridMismatch(ValueError):
    """Paths and field live on different time grids."""


def interpolate(values: np.ndarray, grid: GridSpec, x: np.ndarray) -> np.ndarray:
    """Periodic multilinear interpolation.

    ``values`` has the ``d`` spatial axes first, any trailing shape after;
    ``x`` is ``(P, d)``. Points within ``SNAP_TOL`` cells of a node take the
    nodal value exactly.
    """
    x = np.asarray(x, dtype=float)
    xi = (x + grid.L) / grid.dx
    near = np.round(xi)
    xi = np.where(np.abs(xi - near) < SNAP_TOL, near, xi)
    i0 = np.floor(xi).astype(np.int64)
    frac = xi - i0
    i0 %= grid.M
    i1 = (i0 + 1) % grid.M
    tail = values.shape[grid.d:]
    out = np.zeros((x.shape[0],) + tail)
    for corner in range(2 ** grid.d):
        w = np.ones(x.shape[0])
        idx = []
        for a in range(grid.d):
            if (corner >> a) & 1:
                w = w * frac[:, a]
                idx.append(i1[:, a])
            else:
                w = w * (1.0 - frac[:, a])
                idx.append(i0[:, a])
        nz = w != 0.0
        if not nz.any():
            continue
        sel = tuple(ix[nz] for ix in idx)
        out[nz] += w[nz].reshape((-1,) + (1,) * len(tail)) * values[sel]
    return out


def _as_paths(B, N: int) -> np.ndarray:
    if isinstance(B, BrownianPath):
        B = B.values[:, None, :]
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[:, None, :]
    if B.shape[0] != N + 1:
        raise GridMismatch(f"B has {B.shape[0]} nodes, the field has {N + 1}")
    return B


@dataclass(eq=False)
class PathTriple:
    start: int              # time index i of the start
    x: np.ndarray           # (P, d)
    times: np.ndarray       # (N+1-i,)
    B: np.ndarray           # (N+1-i, P, d), B restricted to [t_i, T]
    X: np.ndarray           # flow positions (unwrapped)
    Y: np.ndarray           # (nodes, P, k)
    Z: np.ndarray           # (nodes, P, k, d)
    k: np.ndarray           # K density along the path, (nodes, P, k)
    K: np.ndarray           # (nodes, P, k), K[0] = 0
    n: float
    wrapped: np.ndarray     # (P,) flow left [-L, L)^d at some node
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def reconstruct(sol: SolutionField, B, t: float, x) -> PathTriple:
    """Evaluate Y, Z and K along the flow from ``(t, x)``.

    ``B`` is a ``BrownianPath`` or an array ``(N+1, P, d)`` of paths on the
    solver's time grid; ``x`` is ``(d,)`` or ``(P, d)``.
    """
    grid = sol.grid
    N = grid.N
    B = _as_paths(B, N)
    i = int(round(t / sol.dt))
    if abs(i * sol.dt - t) > 1e-12 * max(sol.T, 1.0) or not 0 <= i <= N:
        raise GridMismatch(f"start time {t!r} is not a grid node")
    P = B.shape[1]
    x = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1, grid.d), (P, grid.d))
    Bw = B[i:] - B[i]
    X = x[None] + Bw
    Y = np.stack([interpolate(sol.values[j], grid, X[m]) for m, j in enumerate(range(i, N + 1))])
    Z = np.stack([interpolate(sol.gradient[j], grid, X[m]) for m, j in enumerate(range(i, N + 1))])
    kd = -sol.n * (Y - project(Y, sol.domain))
    K = np.zeros_like(Y)
    K[1:] = np.cumsum(0.5 * sol.dt * (kd[1:] + kd[:-1]), axis=0)
    wrapped = np.any((X < -grid.L) | (X >= grid.L), axis=(0, 2))
    return PathTriple(i, np.array(x), sol.times()[i:], Bw, X, Y, Z, kd, K, sol.n, wrapped,
                      dict(sol.meta))


def _tail_sums(incr: np.ndarray) -> np.ndarray:
    """``out[m] = sum_{r >= m} incr[r]`` with a trailing zero row."""
    out = np.zeros((incr.shape[0] + 1,) + incr.shape[1:])
    out[:-1] = np.cumsum(incr[::-1], axis=0)[::-1]
    return out


def bdsde_residual(tr: PathTriple, sol: SolutionField, W: BrownianPath,
                   coefficients: CoefficientSet, terminal, kappa: float = DEFAULT_KAPPA,
                   star_weight: float = STAR_WEIGHT) -> np.ndarray:
    """Residual profile ``R(s)``, shape ``(nodes, P, k)``.

    ``R = Y_s - [Phi(X_T) + sum f dr + sum h dW + (K_T - K_s)
    + star_weight * star(g) - sum Z dB]`` with right endpoints for ``f`` and
    ``h``, left endpoints for ``Z dB``, and the ``kappa`` convention for the
    forward-backward integral.
    """
    N = sol.grid.N
    i = tr.start
    if W.N != N:
        raise GridMismatch("W path and field have different time grids")
    nodes, P, k = tr.Y.shape
    d = sol.grid.d
    dt = sol.dt
    f_nodes = np.empty((nodes, P, k))
    g_nodes = np.empty((nodes, P, k, d))
    h_nodes = np.empty((nodes, P, k, coefficients.l))
    for m in range(nodes):
        tm = tr.times[m]
        f_nodes[m] = coefficients.f(tm, tr.X[m], tr.Y[m], tr.Z[m])
        g_nodes[m] = coefficients.g(tm, tr.X[m], tr.Y[m], tr.Z[m])
        h_nodes[m] = coefficients.h(tm, tr.X[m], tr.Y[m], tr.Z[m])
    dB = np.diff(tr.B, axis=0)
    dW = np.diff(W.values[i:], axis=0)

    f_part = _tail_sums(dt * f_nodes[1:])
    h_part = _tail_sums(np.einsum("mpkl,ml->mpk", h_nodes[1:], dW))
    # per-step pieces of the forward-backward integral; star_integral on one
    # step is exactly the step's contribution
    star_steps = np.stack([star_integral(g_nodes[m:m + 2], tr.B[m:m + 2, :, None, :], kappa)
                           for m in range(nodes - 1)]) if nodes > 1 else np.zeros((0, P, k))
    star_part = _tail_sums(star_steps)
    z_part = _tail_sums(np.einsum("mpkd,mpd->mpk", tr.Z[:-1], dB))

    phi = terminal(tr.X[-1])
    rhs = phi[None] + f_part + h_part + (tr.K[-1][None] - tr.K) + star_weight * star_part - z_part
    return tr.Y - rhs


def max_residual(R: np.ndarray) -> np.ndarray:
    """``max_s |R(s)|`` per path (Euclidean norm over components)."""
    return np.max(np.linalg.norm(R, axis=-1), axis=0)


# ---------------------------------------------------------------------------
# minimality


TEST_FAMILIES = ("constant", "projection", "random_walk")


def skorokhod_pairing(tr: PathTriple, v, D: ConvexDomain, tol: float = 1e-12) -> np.ndarray:
    """Trapezoidal ``int (Y_s - v_s) . dK_s`` per path.

    ``v`` is ``(k,)``, ``(P, k)`` or ``(nodes, P, k)`` and must take values
    in the closure of D.
    """
    v = np.broadcast_to(np.asarray(v, dtype=float), tr.Y.shape) if np.ndim(v) != 2 \
        else np.broadcast_to(np.asarray(v, dtype=float)[None], tr.Y.shape)
    if np.max(distance(v, D)) > tol:
        raise ValueError("test process leaves the closure of the domain")
    integrand = np.sum((tr.Y - v) * tr.k, axis=-1)
    if integrand.shape[0] < 2:
        return np.zeros(integrand.shape[1:])
    return tr.dt * (0.5 * integrand[0] + integrand[1:-1].sum(axis=0) + 0.5 * integrand[-1])


def admissible_processes(tr: PathTriple, D: ConvexDomain, family: str, count: int,
                         rng: np.random.Generator, smoothing: int = 8) -> list[np.ndarray]:
    """Closure(D)-valued test processes on the triple's time grid."""
    nodes, P, k = tr.Y.shape
    if family == "constant":
        return list(sample_inside(D, count, rng))
    if family == "projection":
        base = project(tr.Y, D)
        out = [base]
        for _ in range(count - 1):
            lam = rng.uniform()
            out.append(project(lam * base, D))  # shrink towards 0 in D
        return out
    if family == "random_walk":
        out = []
        kernel = np.ones(smoothing) / smoothing
        scale = D.bounding_scale()
        for _ in range(count):
            steps = rng.standard_normal((nodes + smoothing - 1, P, k)) * np.sqrt(tr.dt)
            walk = np.cumsum(steps, axis=0) * scale
            smooth = np.apply_along_axis(lambda a: np.convolve(a, kernel, "valid"), 0, walk)
            out.append(project(smooth, D))
        return out
    raise ValueError(f"unknown test family {family!r}")


# ---------------------------------------------------------------------------
# a priori statistics


@dataclass
class AprioriStats:
    sup_y2: float
    z2: float
    k_tv: float
    sup_y4: float
    z2_sq: float
    k_tv_sq: float
    data: float
    volume: float

    def normalized(self) -> dict:
        """Probability-normalized values (divide by the torus volume)."""
        keys = ("sup_y2", "z2", "k_tv", "sup_y4", "z2_sq", "k_tv_sq")
        return {key: getattr(self, key) / self.volume for key in keys}

    def ratios(self) -> dict:
        keys = ("sup_y2", "z2", "k_tv", "sup_y4", "z2_sq", "k_tv_sq")
        return {key: (getattr(self, key) / self.data if self.data > 0 else 0.0) for key in keys}

    def jensen_ok(self) -> bool:
        p = self.normalized()
        return (p["sup_y4"] >= p["sup_y2"] ** 2 and p["z2_sq"] >= p["z2"] ** 2
                and p["k_tv_sq"] >= p["k_tv"] ** 2)


def path_statistics(tr: PathTriple) -> dict[str, np.ndarray]:
    """Per-path ``sup|Y|^2``, ``int |Z|^2`` and ``|K|_VT``."""
    dt = tr.dt
    y2 = np.sum(tr.Y ** 2, axis=-1)
    z2 = np.sum(tr.Z ** 2, axis=(-2, -1))
    z_int = dt * (0.5 * z2[0] + z2[1:-1].sum(axis=0) + 0.5 * z2[-1]) if z2.shape[0] > 1 \
        else np.zeros(z2.shape[1:])
    k_tv = np.linalg.norm(np.diff(tr.K, axis=0), axis=-1).sum(axis=0)
    return {"sup_y2": y2.max(axis=0), "z2": z_int, "k_tv": k_tv}


def data_functional(sol: SolutionField, coefficients: CoefficientSet, terminal) -> float:
    """``|Phi|^2 + int (|f0|^2 + |h0|^2 + |g0|^2)`` by grid quadrature."""
    grid = sol.grid
    x = grid.nodes().reshape(-1, grid.d)
    phi = terminal(x)
    total = float(np.sum(phi ** 2)) * grid.cell_volume
    dt = sol.dt
    for j, t in enumerate(sol.times()):
        w = 0.5 if j in (0, grid.N) else 1.0
        b = coefficients.f0(t, x) ** 2 + coefficients.h0(t, x) ** 2 + coefficients.g0(t, x) ** 2
        total += w * dt * float(np.sum(b)) * grid.cell_volume
    return total


def apriori_stats(triples, sol: SolutionField, coefficients: CoefficientSet,
                  terminal) -> AprioriStats:
    """Monte Carlo ``E E^m`` estimates over uniformly started triples.

    Starting points are assumed uniform on the torus, so each mean is scaled
    by the torus volume.
    """
    triples = list(triples)
    if not triples:
        raise ValueError("need at least one triple")
    stats = [path_statistics(tr) for tr in triples]
    cat = {key: np.concatenate([s[key] for s in stats]) for key in stats[0]}
    vol = sol.grid.volume
    return AprioriStats(
        sup_y2=vol * float(cat["sup_y2"].mean()),
        z2=vol * float(cat["z2"].mean()),
        k_tv=vol * float(cat["k_tv"].mean()),
        sup_y4=vol * float((cat["sup_y2"] ** 2).mean()),
        z2_sq=vol * float((cat["z2"] ** 2).mean()),
        k_tv_sq=vol * float((cat["k_tv"] ** 2).mean()),
        data=data_functional(sol, coefficients, terminal),
        volume=vol,
    )


def write_path_csv(tr: PathTriple, path, residual: np.ndarray | None = None, which: int = 0,
                   extra: dict | None = None) -> None:
    """Debug export of one path: ``s, Y.., |Z|, K.., |R|``."""
    meta = dict(tr.meta)
    meta.update(extra or {})
    k = tr.Y.shape[-1]
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh)
        w.writerow(["s"] + [f"y{c}" for c in range(k)] + ["z_norm"]
                   + [f"k{c}" for c in range(k)] + ["residual"])
        for m, s in enumerate(tr.times):
            r = float(np.linalg.norm(residual[m, which])) if residual is not None else float("nan")
            w.writerow([repr(float(s))] + [repr(float(v)) for v in tr.Y[m, which]]
                       + [repr(float(np.linalg.norm(tr.Z[m, which])))]
                       + [repr(float(v)) for v in tr.K[m, which]] + [repr(r)])

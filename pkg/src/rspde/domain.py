"""Convex constraint sets in value space: projection, distance, inradius.

All point arguments are arrays whose last axis has length ``k``; leading
axes are treated as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_ITER = 1000

KINDS = ("ball", "box", "halfspace", "polytope")


class DomainError(ValueError):
    """Invalid domain description (e.g. 0 not interior)."""


class ProjectionError(RuntimeError):
    """Iterative projection failed to converge."""


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    """A closed convex set ``D`` in R^k with 0 in its interior.

    Use the ``ball``, ``box``, ``halfspace`` and ``polytope`` constructors
    rather than building instances by hand.
    """

    kind: str
    dim: int
    center: np.ndarray | None = None
    radius: float | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    # polytope / halfspace: rows of unit normals and offsets, D = {N x <= b}
    normals: np.ndarray | None = None
    offsets: np.ndarray | None = None

    # -- constructors -----------------------------------------------------
    @classmethod
    def ball(cls, center, radius: float) -> "ConvexDomain":
        center = np.asarray(center, dtype=float).ravel()
        radius = float(radius)
        if radius <= 0:
            raise DomainError("ball radius must be positive")
        if np.linalg.norm(center) >= radius:
            raise DomainError("0 must lie in the interior of the ball")
        return cls("ball", center.size, center=center, radius=radius)

    @classmethod
    def box(cls, lo, hi) -> "ConvexDomain":
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise DomainError("box bounds have different lengths")
        if not (np.all(lo < 0) and np.all(hi > 0)):
            raise DomainError("box must satisfy lo < 0 < hi componentwise")
        return cls("box", lo.size, lo=lo, hi=hi)

    @classmethod
    def halfspace(cls, normal, offset: float) -> "ConvexDomain":
        normal = np.asarray(normal, dtype=float).ravel()
        nn = np.linalg.norm(normal)
        if abs(nn - 1.0) > 1e-12:
            raise DomainError("halfspace normal must have unit length")
        if offset <= 0:
            raise DomainError("halfspace offset must be positive so that 0 is interior")
        return cls("halfspace", normal.size, normals=normal[None, :],
                   offsets=np.array([float(offset)]))

    @classmethod
    def polytope(cls, normals, offsets) -> "ConvexDomain":
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        offsets = np.asarray(offsets, dtype=float).ravel()
        if normals.shape[0] != offsets.size:
            raise DomainError("need one offset per halfspace")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0):
            raise DomainError("zero normal in polytope")
        # rescale rows to unit normals so offsets are distances from 0
        normals = normals / norms[:, None]
        offsets = offsets / norms
        if np.any(offsets <= 0):
            raise DomainError("0 must lie in the interior of the polytope")
        return cls("polytope", normals.shape[1], normals=normals, offsets=offsets)

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> "ConvexDomain":
        kind = spec.get("kind")
        if kind == "ball":
            return cls.ball(spec["center"], spec["radius"])
        if kind == "box":
            return cls.box(spec["lo"], spec["hi"])
        if kind == "halfspace":
            return cls.halfspace(spec["normal"], spec["offset"])
        if kind == "polytope":
            return cls.polytope(spec["normals"], spec["offsets"])
        raise DomainError(f"unknown domain kind {kind!r}")

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "ball":
            return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}
        if self.kind == "box":
            return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.kind == "halfspace":
            return {"kind": "halfspace", "normal": self.normals[0].tolist(),
                    "offset": float(self.offsets[0])}
        return {"kind": "polytope", "normals": self.normals.tolist(),
                "offsets": self.offsets.tolist()}

    # -- geometry ---------------------------------------------------------
    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return distance(x, self) <= tol

    def bounding_scale(self) -> float:
        """Rough size of D, used to scale random samples."""
        if self.kind == "ball":
            return float(np.linalg.norm(self.center) + self.radius)
        if self.kind == "box":
            return float(np.max(np.maximum(-self.lo, self.hi)))
        return float(np.max(self.offsets)) * 2.0


def _check_points(x, D: ConvexDomain) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != D.dim:
        raise ValueError(f"points have last axis {x.shape[-1]}, domain dimension is {D.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("project requires finite points")
    return x


def _halfspace_violation(x: np.ndarray, D: ConvexDomain) -> np.ndarray:
    return x @ D.normals.T - D.offsets


def _dykstra(x: np.ndarray, D: ConvexDomain) -> np.ndarray:
    """Dykstra's alternating projection onto an intersection of halfspaces.

    Runs on a flat batch ``(P, k)``; only points outside D are iterated.
    """
    out = x.copy()
    outside = np.any(_halfspace_violation(x, D) > 0, axis=1)
    if not np.any(outside):
        return out
    y = x[outside].copy()
    m = D.normals.shape[0]
    incr = np.zeros((m,) + y.shape)
    for _ in range(DYKSTRA_MAX_ITER):
        y_prev = y.copy()
        for i in range(m):
            a, b = D.normals[i], D.offsets[i]
            z = y + incr[i]
            viol = np.maximum(z @ a - b, 0.0)
            y = z - viol[:, None] * a
            incr[i] = z - y
        if np.max(np.abs(y - y_prev)) <= DYKSTRA_TOL:
            break
    else:
        raise ProjectionError(
            f"Dykstra projection did not converge in {DYKSTRA_MAX_ITER} iterations; "
            "polytope may be ill-conditioned")
    out[outside] = _polish_active_set(x[outside], y, D)
    return out


def _polish_active_set(x: np.ndarray, y: np.ndarray, D: ConvexDomain) -> np.ndarray:
    """Refine Dykstra output by solving the KKT system on its active set.

    The refined point is kept only if it is feasible and its multipliers are
    nonnegative, so it is the exact projection up to rounding.
    """
    out = y.copy()
    viol = _halfspace_violation(y, D)
    for p in range(x.shape[0]):
        active = np.flatnonzero(viol[p] > -1e-7)
        if active.size == 0 or active.size > D.dim:
            continue
        A = D.normals[active]
        b = D.offsets[active]
        gram = A @ A.T
        try:
            lam = np.linalg.solve(gram, A @ x[p] - b)
        except np.linalg.LinAlgError:
            continue
        cand = x[p] - A.T @ lam
        if np.all(lam >= -1e-12) and np.all(cand @ D.normals.T - D.offsets <= 1e-13):
            out[p] = cand
    return out


def project(x, D: ConvexDomain) -> np.ndarray:
    """Orthogonal projection of ``x`` onto the closure of ``D``.

    Points already in the closure are returned unchanged (bitwise).
    """
    x = _check_points(x, D)
    shape = x.shape
    flat = x.reshape(-1, D.dim)
    if D.kind == "ball":
        rel = flat - D.center
        r = np.linalg.norm(rel, axis=1)
        out = flat.copy()
        outside = r > D.radius
        out[outside] = D.center + rel[outside] * (D.radius / r[outside])[:, None]
    elif D.kind == "box":
        out = np.clip(flat, D.lo, D.hi)
    elif D.kind == "halfspace":
        viol = np.maximum(flat @ D.normals[0] - D.offsets[0], 0.0)
        out = flat.copy()
        pos = viol > 0
        out[pos] = flat[pos] - viol[pos, None] * D.normals[0]
    else:
        out = _dykstra(flat, D)
    return out.reshape(shape)


def distance(x, D: ConvexDomain) -> np.ndarray:
    """Euclidean distance from ``x`` to the closure of ``D``."""
    x = _check_points(x, D)
    return np.linalg.norm(x - project(x, D), axis=-1)


def boundary_distance(x, D: ConvexDomain) -> np.ndarray:
    """Distance from ``x`` to the boundary of ``D``.

    Equals ``distance(x, D)`` outside D and the distance to the nearest face
    (or sphere) inside.
    """
    x = _check_points(x, D)
    if D.kind == "ball":
        inner = D.radius - np.linalg.norm(x - D.center, axis=-1)
    elif D.kind == "box":
        inner = np.min(np.minimum(x - D.lo, D.hi - x), axis=-1)
    else:
        inner = np.min(D.offsets - x @ D.normals.T, axis=-1)
    return np.where(inner >= 0, inner, distance(x, D))


def inradius(D: ConvexDomain) -> float:
    """Radius of the largest ball about 0 contained in D.

    This is the coercivity constant used for ``x.(x - pi(x)) >= r |x - pi(x)|``.
    """
    if D.kind == "ball":
        r = D.radius - float(np.linalg.norm(D.center))
    elif D.kind == "box":
        r = float(min(np.min(-D.lo), np.min(D.hi)))
    else:
        r = float(np.min(D.offsets))
    if r <= 0:
        raise DomainError("0 is not an interior point of the domain")
    return r


def sample_inside(D: ConvexDomain, size: int, rng: np.random.Generator) -> np.ndarray:
    """Points of the closure of D: a mix of interior draws and boundary points."""
    scale = D.bounding_scale()
    n_in = size - size // 4
    pts = []
    have = 0
    while have < n_in:
        cand = rng.uniform(-scale, scale, size=(2 * n_in, D.dim))
        cand = cand[distance(cand, D) == 0.0]
        pts.append(cand)
        have += cand.shape[0]
    inner = np.concatenate(pts)[:n_in]
    on_boundary = project(rng.normal(scale=3 * scale, size=(size - n_in, D.dim)), D)
    out = np.concatenate([inner, on_boundary])
    return out[rng.permutation(size)]


@dataclass
class ProjectionReport:
    samples: int
    max_violation: dict[str, float]
    tolerance: float
    coercivity: float

    @property
    def ok(self) -> bool:
        return all(v <= self.tolerance for v in self.max_violation.values())


def verify_projection_properties(D: ConvexDomain, samples: int, seed: int,
                                 tol: float = 1e-10) -> ProjectionReport:
    """Check the three projection inequalities on random pairs.

    * ``(x' - x).(x - pi x) <= 0`` for ``x'`` in the closure of D,
    * ``(x' - x).(x - pi x) <= (x' - pi x').(x - pi x)`` for arbitrary pairs,
    * ``x.(x - pi x) >= r |x - pi x|`` with ``r = inradius(D)``.

    Also records nonexpansiveness of the projection. Violations are positive
    parts of ``lhs - rhs``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    scale = D.bounding_scale()
    x = rng.normal(scale=2 * scale, size=(samples, D.dim))
    x2 = rng.normal(scale=2 * scale, size=(samples, D.dim))
    inside = sample_inside(D, samples, rng)
    px, px2 = project(x, D), project(x2, D)
    nx = x - px
    gamma = inradius(D)
    v_in = np.max(np.einsum("ij,ij->i", inside - x, nx))
    v_pair = np.max(np.einsum("ij,ij->i", x2 - x, nx) - np.einsum("ij,ij->i", x2 - px2, nx))
    v_coer = np.max(gamma * np.linalg.norm(nx, axis=1) - np.einsum("ij,ij->i", x, nx))
    v_lip = np.max(np.linalg.norm(px - px2, axis=1) - np.linalg.norm(x - x2, axis=1))
    viol = {
        "obtuse_angle": max(float(v_in), 0.0),
        "monotone_pair": max(float(v_pair), 0.0),
        "coercivity": max(float(v_coer), 0.0),
        "nonexpansive": max(float(v_lip), 0.0),
    }
    return ProjectionReport(samples=samples, max_violation=viol, tolerance=tol, coercivity=gamma)

"""Polytopes, boxes and hyperplanes: containment, sign-pattern feasibility and
Monte-Carlo volume fractions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import lp as lpmod
from .errors import EmptySamplesError, SamplingError, ShapeError

SIGN_TOL = 1e-7
REJECTION_FACTOR = 50


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{x : a_matrix @ x <= b_vector}``."""

    a_matrix: np.ndarray
    b_vector: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        b = np.asarray(self.b_vector, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"polytope matrix {a.shape} does not match rhs {b.shape}")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_vector", b)

    @classmethod
    def universe(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.a_matrix.shape[1]

    @property
    def n_rows(self) -> int:
        return self.a_matrix.shape[0]

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise ShapeError("cannot intersect polytopes of different dimension")
        return Polytope(np.vstack([self.a_matrix, other.a_matrix]),
                        np.concatenate([self.b_vector, other.b_vector]))

    def constraints(self, tag: str = "poly") -> list:
        return [lpmod.Constraint(row, "<=", rhs, f"{tag}[{i}]")
                for i, (row, rhs) in enumerate(zip(self.a_matrix, self.b_vector))]

    def bounding_box(self, tol: float = lpmod.DEFAULT_TOL) -> "Box":
        """Per-coordinate bounds by LP; raises if the polytope is empty or unbounded."""
        d = self.dim
        lower, upper = np.empty(d), np.empty(d)
        base = lpmod.LinearProgram.feasibility(d, self.constraints())
        for j in range(d):
            for sign, store in ((1.0, lower), (-1.0, upper)):
                c = np.zeros(d)
                c[j] = sign
                res = lpmod.solve(lpmod.LinearProgram(c, base.lower, base.upper, base.constraints), tol)
                if res.status is lpmod.Status.INFEASIBLE:
                    raise ValueError("polytope is empty")
                if res.status is lpmod.Status.UNBOUNDED:
                    raise ValueError(f"polytope is unbounded along coordinate {j}")
                store[j] = res.solution[j]
        return Box(lower, np.maximum(upper, lower))

    def to_dict(self) -> dict:
        return {"A": self.a_matrix.tolist(), "b": self.b_vector.tolist()}


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ShapeError("box bounds differ in length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def to_polytope(self) -> Polytope:
        eye = np.eye(self.dim)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]))

    def bounding_box(self, tol: float = 0.0) -> "Box":
        return self

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


Region = Union[Polytope, Box]


def as_polytope(region: Region) -> Polytope:
    return region.to_polytope() if isinstance(region, Box) else region


@dataclass(frozen=True, eq=False)
class Hyperplane:
    """Boundary ``{x : normal @ x + offset = 0}``; the ``+`` side is ``>= 0``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(-1))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def degenerate(self) -> bool:
        return not np.any(self.normal)

    def evaluate(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.offset


def contains(p: Region, x, tol: float = 1e-9) -> bool:
    x = np.asarray(x, dtype=float)
    p = as_polytope(p)
    if x.shape != (p.dim,):
        raise ShapeError(f"point has shape {x.shape}, polytope dimension is {p.dim}")
    return bool(np.all(p.a_matrix @ x <= p.b_vector + tol))


def halfspace_rows(planes: Sequence, dim: int) -> Polytope:
    """Rows ``-sign * (normal @ x) <= sign * offset`` for (plane, sign) pairs."""
    if not planes:
        return Polytope.universe(dim)
    a = np.array([-s * pl.normal for pl, s in planes])
    b = np.array([s * pl.offset for pl, s in planes])
    return Polytope(a, b)


def sign_pattern_feasible(planes: Sequence, domain: Region, tol: float = SIGN_TOL,
                          lp_tol: float = lpmod.DEFAULT_TOL) -> bool:
    """Is there ``x`` in ``domain`` with ``sign * (normal @ x + offset) >= 0`` for all pairs?

    ``planes`` is a sequence of ``(Hyperplane, sign)`` with sign in ``{+1, -1}``.
    Each inequality is relaxed by ``tol``.
    """
    domain = as_polytope(domain)
    for pl, s in planes:
        if pl.normal.shape != (domain.dim,):
            raise ShapeError("hyperplane dimension does not match the domain")
        if s not in (1, -1):
            raise ValueError("sign must be +1 or -1")
    rows = halfspace_rows(planes, domain.dim)
    rows = Polytope(rows.a_matrix, rows.b_vector + tol)
    system = domain.intersect(rows)
    prog = lpmod.LinearProgram.feasibility(domain.dim, system.constraints("pattern"))
    return lpmod.solve(prog, lp_tol).status is not lpmod.Status.INFEASIBLE


def volume_fraction(plane: Hyperplane, side: int, samples) -> float:
    """Fraction of ``samples`` on ``side`` of ``plane`` (boundary counts for both sides)."""
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptySamplesError("volume_fraction needs at least one sample")
    vals = plane.evaluate(pts)
    hits = vals >= 0 if side > 0 else vals <= 0
    return float(np.mean(hits))


def sample_domain(domain: Region, count: int, seed: int,
                  bounding_box: Box | None = None) -> np.ndarray:
    """``count`` points drawn uniformly from ``domain`` as an array ``(count, dim)``.

    Boxes are sampled directly. Polytopes are rejection-sampled from their
    bounding box, giving up with ``SamplingError`` after drawing
    ``REJECTION_FACTOR * count`` candidates.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(domain, Box):
        return rng.uniform(domain.lower, domain.upper, size=(count, domain.dim))
    box = bounding_box if bounding_box is not None else domain.bounding_box()
    accepted = []
    n_acc = 0
    drawn = 0
    budget = REJECTION_FACTOR * count
    batch = max(count, 64)
    while n_acc < count and drawn < budget:
        size = min(batch, budget - drawn)
        cand = rng.uniform(box.lower, box.upper, size=(size, box.dim))
        drawn += size
        ok = np.all(cand @ domain.a_matrix.T <= domain.b_vector + 1e-12, axis=1)
        accepted.append(cand[ok])
        n_acc += int(ok.sum())
    if n_acc < count:
        raise SamplingError(f"accepted {n_acc} of {count} samples after {drawn} draws")
    return np.vstack(accepted)[:count]

"""Dense two-phase simplex, infeasible-subsystem extraction and LP text dumps.

Programs are immutable values: ``with_constraints`` and ``without_tags``
return new programs and never touch the original.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import BaseInfeasibleError, LPError, NotInfeasibleError, NumericError, ShapeError

DEFAULT_TOL = 1e-7
PIVOT_TOL = 1e-9


class Status(str, Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"


@dataclass(frozen=True, eq=False)
class Constraint:
    coeffs: np.ndarray
    sense: str  # "<=", ">=" or "="
    rhs: float
    tag: str | None = None

    def __post_init__(self):
        if self.sense not in ("<=", ">=", "="):
            raise ValueError(f"unknown constraint sense {self.sense!r}")
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1:
            raise ShapeError("constraint coefficients must be a vector")
        if not (np.all(np.isfinite(c)) and math.isfinite(self.rhs)):
            raise ValueError("constraint has non-finite data")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "rhs", float(self.rhs))


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """``min objective @ x`` subject to ``constraints`` and ``lower <= x <= upper``."""

    objective: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constraints: tuple = ()
    names: tuple | None = None

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        n = c.shape[0]
        if lo.shape != (n,) or hi.shape != (n,):
            raise ShapeError("bounds must match the number of variables")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or not np.all(np.isfinite(c)):
            raise ValueError("objective or bounds contain NaN/Inf where not allowed")
        cons = tuple(self.constraints)
        for con in cons:
            if con.coeffs.shape != (n,):
                raise ShapeError(
                    f"constraint {con.tag!r} has {con.coeffs.shape[0]} coefficients, expected {n}")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "constraints", cons)

    @classmethod
    def feasibility(cls, n_vars: int, constraints=(), lower=None, upper=None) -> "LinearProgram":
        lo = np.full(n_vars, -np.inf) if lower is None else lower
        hi = np.full(n_vars, np.inf) if upper is None else upper
        return cls(np.zeros(n_vars), lo, hi, tuple(constraints))

    @property
    def n_vars(self) -> int:
        return self.objective.shape[0]

    @property
    def tags(self) -> list:
        return [c.tag for c in self.constraints]

    def matrices(self):
        """``(A, senses, rhs)`` stacked over all constraints."""
        if not self.constraints:
            return np.zeros((0, self.n_vars)), [], np.zeros(0)
        a = np.vstack([c.coeffs for c in self.constraints])
        return a, [c.sense for c in self.constraints], np.array([c.rhs for c in self.constraints])


def with_constraints(lp: LinearProgram, added: Iterable[Constraint]) -> LinearProgram:
    added = tuple(added)
    for con in added:
        if con.coeffs.shape != (lp.n_vars,):
            raise ShapeError(f"added constraint {con.tag!r} has wrong length")
    return LinearProgram(lp.objective, lp.lower, lp.upper, lp.constraints + added, lp.names)


def without_tags(lp: LinearProgram, tags) -> LinearProgram:
    tags = set(tags)
    kept = tuple(c for c in lp.constraints if c.tag not in tags)
    return LinearProgram(lp.objective, lp.lower, lp.upper, kept, lp.names)


@dataclass(frozen=True, eq=False)
class LpOutcome:
    status: Status
    solution: np.ndarray | None = None
    objective_value: float | None = None
    infeasibility_witness: tuple = ()
    iterations: int = 0


@dataclass(frozen=True)
class IisReport:
    tags: tuple


# --------------------------------------------------------------------------- simplex

def _pivot(t: np.ndarray, row: int, col: int) -> None:
    t[row] /= t[row, col]
    column = t[:, col].copy()
    column[row] = 0.0
    hit = np.flatnonzero(column)
    if hit.size:
        t[hit] -= column[hit, None] * t[row]
    t[:, col] = 0.0
    t[row, col] = 1.0


class _Tableau:
    """Standard-form tableau with an objective row at the bottom and rhs on the right."""

    def __init__(self, lp: LinearProgram):
        n = lp.n_vars
        lo, hi = lp.lower, lp.upper
        # x = shift + colmap @ p, with p >= 0
        shift = np.zeros(n)
        col_entries = []  # (var, sign)
        bound_rows = []   # (column index, upper bound on that column)
        for j in range(n):
            if np.isfinite(lo[j]):
                shift[j] = lo[j]
                col_entries.append((j, 1.0))
                if np.isfinite(hi[j]):
                    bound_rows.append((len(col_entries) - 1, hi[j] - lo[j]))
            elif np.isfinite(hi[j]):
                shift[j] = hi[j]
                col_entries.append((j, -1.0))
            else:
                col_entries.append((j, 1.0))
                col_entries.append((j, -1.0))
        n_p = len(col_entries)
        colmap = np.zeros((n, n_p))
        for k, (j, s) in enumerate(col_entries):
            colmap[j, k] = s

        a, senses, b = lp.matrices()
        a_p = a @ colmap
        b_p = b - a @ shift
        rows = [a_p]
        rhs = [b_p]
        senses = list(senses)
        if bound_rows:
            br = np.zeros((len(bound_rows), n_p))
            for r, (k, ub) in enumerate(bound_rows):
                br[r, k] = 1.0
            rows.append(br)
            rhs.append(np.array([ub for _, ub in bound_rows]))
            senses += ["<="] * len(bound_rows)
        a_all = np.vstack(rows) if rows else np.zeros((0, n_p))
        b_all = np.concatenate(rhs) if rhs else np.zeros(0)
        m = a_all.shape[0]

        ineq = [i for i, s in enumerate(senses) if s != "="]
        slack = np.zeros((m, len(ineq)))
        for k, i in enumerate(ineq):
            slack[i, k] = 1.0 if senses[i] == "<=" else -1.0
        a_std = np.hstack([a_all, slack])
        flip = b_all < 0
        a_std[flip] *= -1.0
        b_std = np.where(flip, -b_all, b_all)

        self.n_constraint_rows = len(lp.constraints)
        self.shift, self.colmap = shift, colmap
        self.a_std, self.b_std = a_std, b_std
        self.m, self.n_std = a_std.shape
        self.cost = np.concatenate([colmap.T @ lp.objective, np.zeros(len(ineq))])
        self.const = float(lp.objective @ shift)
        self.rows = np.arange(self.m)  # original row index of each tableau row

        # Every row carries an artificial column (its phase-1 reduced cost yields
        # the Farkas multiplier), but rows whose slack enters with +1 start with
        # the slack basic instead, so phase 1 only has the remaining rows to repair.
        basis = np.arange(self.n_std, self.n_std + m)
        n_all = a_all.shape[1]
        for k, i in enumerate(ineq):
            if a_std[i, n_all + k] > 0:
                basis[i] = n_all + k
        needs_art = basis >= self.n_std
        t = np.zeros((m + 1, self.n_std + m + 1))
        t[:m, : self.n_std] = a_std
        t[:m, self.n_std: self.n_std + m] = np.eye(m)
        t[:m, -1] = b_std
        t[-1, : self.n_std] = -a_std[needs_art].sum(axis=0)
        t[-1, self.n_std: self.n_std + m] = np.where(needs_art, 0.0, 1.0)
        t[-1, -1] = -b_std[needs_art].sum()
        self.t = t
        self.basis = basis
        self.iterations = 0

    def run(self, n_cols: int, opt_tol: float, max_iter: int, dantzig_limit: int) -> bool:
        """Pivot until optimal (True) or unbounded (False)."""
        t = self.t
        local = 0
        while True:
            if self.iterations > max_iter:
                raise NumericError("simplex iteration limit exceeded")
            red = t[-1, :n_cols]
            if local < dantzig_limit:
                col = int(np.argmin(red))
                if red[col] >= -opt_tol:
                    return True
            else:
                cand = np.flatnonzero(red < -opt_tol)
                if cand.size == 0:
                    return True
                col = int(cand[0])
            column = t[:-1, col]
            pos = np.flatnonzero(column > PIVOT_TOL)
            if pos.size == 0:
                return False
            ratios = t[pos, -1] / column[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12 * (1.0 + abs(best))]
            row = int(ties[np.argmin(self.basis[ties])])
            _pivot(t, row, col)
            self.basis[row] = col
            self.iterations += 1
            local += 1

    def farkas_rows(self) -> np.ndarray:
        """Rows whose phase-1 multipliers are non-zero."""
        art = self.t[-1, self.n_std: self.n_std + self.m]
        y = 1.0 - art
        return self.rows[np.abs(y) > 1e-9] if y.size else np.zeros(0, dtype=int)

    def drop_artificials(self) -> None:
        t = self.t
        keep = np.ones(self.m, dtype=bool)
        for r in range(self.m):
            if self.basis[r] >= self.n_std:
                row = np.abs(t[r, : self.n_std])
                c = int(np.argmax(row)) if row.size else -1
                if c >= 0 and row[c] > PIVOT_TOL:
                    _pivot(t, r, c)
                    self.basis[r] = c
                else:
                    keep[r] = False
        body = t[:-1][keep]
        body = np.hstack([body[:, : self.n_std], body[:, -1:]])
        self.basis = self.basis[keep]
        self.rows = self.rows[keep]
        self.m = body.shape[0]
        obj = np.zeros((1, self.n_std + 1))
        obj[0, : self.n_std] = self.cost - self.cost[self.basis] @ body[:, : self.n_std]
        obj[0, -1] = -self.cost[self.basis] @ body[:, -1]
        self.t = np.vstack([body, obj])

    def primal(self) -> np.ndarray:
        p = np.zeros(self.n_std)
        p[self.basis] = self.t[:-1, -1]
        try:
            basis_matrix = self.a_std[self.rows][:, self.basis]
            refined = np.linalg.solve(basis_matrix, self.b_std[self.rows])
            if np.all(np.isfinite(refined)):
                p[self.basis] = refined
        except np.linalg.LinAlgError:
            pass
        p = np.maximum(p, 0.0)
        n_p = self.colmap.shape[1]
        return self.shift + self.colmap @ p[:n_p]


def _violation(lp: LinearProgram, x: np.ndarray) -> float:
    worst = 0.0
    if np.any(np.isfinite(lp.lower)):
        worst = max(worst, float(np.max(np.where(np.isfinite(lp.lower), lp.lower - x, 0.0))))
    if np.any(np.isfinite(lp.upper)):
        worst = max(worst, float(np.max(np.where(np.isfinite(lp.upper), x - lp.upper, 0.0))))
    if lp.constraints:
        a, senses, b = lp.matrices()
        lhs = a @ x
        for v, s, r in zip(lhs, senses, b):
            scale = 1.0 + abs(r)
            if s == "<=":
                worst = max(worst, (v - r) / scale)
            elif s == ">=":
                worst = max(worst, (r - v) / scale)
            else:
                worst = max(worst, abs(v - r) / scale)
    return worst


def _solve_simplex(lp: LinearProgram, tol: float) -> LpOutcome:
    if np.any(lp.lower > lp.upper + tol):
        return LpOutcome(Status.INFEASIBLE)
    tab = _Tableau(lp)
    scale = max(1.0, float(np.max(np.abs(tab.b_std))) if tab.m else 1.0)
    max_iter = 50 * (tab.m + tab.n_std) + 1000
    dantzig_limit = 10 * (tab.m + tab.n_std) + 100

    if tab.m:
        tab.run(tab.n_std, 1e-11 * scale, max_iter, dantzig_limit)
        infeas = -tab.t[-1, -1]
        if infeas > tol * scale:
            witness = tuple(lp.constraints[i].tag for i in tab.farkas_rows()
                            if i < tab.n_constraint_rows and lp.constraints[i].tag is not None)
            return LpOutcome(Status.INFEASIBLE, infeasibility_witness=witness,
                             iterations=tab.iterations)
    tab.drop_artificials()
    cscale = max(1.0, float(np.max(np.abs(tab.cost))) if tab.cost.size else 1.0)
    bounded = tab.run(tab.n_std, 1e-9 * cscale, max_iter, dantzig_limit)
    if not bounded:
        return LpOutcome(Status.UNBOUNDED, iterations=tab.iterations)
    x = tab.primal()
    if _violation(lp, x) > max(tol, 1e-6):
        raise NumericError("simplex returned a point violating the constraints")
    return LpOutcome(Status.OPTIMAL, x, float(lp.objective @ x), iterations=tab.iterations)


def _solve_highs(lp: LinearProgram, tol: float) -> LpOutcome:
    from scipy.optimize import linprog

    a, senses, b = lp.matrices()
    senses = np.array(senses, dtype=object)
    le, ge, eq = senses == "<=", senses == ">=", senses == "="
    a_ub = np.vstack([a[le], -a[ge]]) if (le.any() or ge.any()) else None
    b_ub = np.concatenate([b[le], -b[ge]]) if a_ub is not None else None
    a_eq = a[eq] if eq.any() else None
    b_eq = b[eq] if eq.any() else None
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u)
              for l, u in zip(lp.lower, lp.upper)]
    def run(c):
        return linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds,
                       method="highs", options={"primal_feasibility_tolerance": tol})

    res = run(lp.objective)
    if res.status == 0:
        return LpOutcome(Status.OPTIMAL, res.x, float(res.fun))
    if res.status == 2:
        # presolve can label an unbounded program infeasible; ask without the objective
        if np.any(lp.objective) and run(np.zeros(lp.n_vars)).status == 0:
            return LpOutcome(Status.UNBOUNDED)
        return LpOutcome(Status.INFEASIBLE)
    if res.status == 3:
        return LpOutcome(Status.UNBOUNDED)
    raise NumericError(f"HiGHS failed: {res.message}")


BACKENDS = {"simplex": _solve_simplex, "highs": _solve_highs}


def solve(lp: LinearProgram, tol: float = DEFAULT_TOL, backend: str = "simplex") -> LpOutcome:
    """Solve ``lp``. The built-in simplex is the default and reference backend."""
    try:
        impl = BACKENDS[backend]
    except KeyError:
        raise LPError(f"unknown LP backend {backend!r}") from None
    return impl(lp, tol)


def is_feasible(lp: LinearProgram, tol: float = DEFAULT_TOL, backend: str = "simplex") -> bool:
    if np.any(lp.objective):
        lp = LinearProgram(np.zeros(lp.n_vars), lp.lower, lp.upper, lp.constraints, lp.names)
    return solve(lp, tol, backend).status is not Status.INFEASIBLE


# --------------------------------------------------------------------------- IIS

def extract_iis(lp: LinearProgram, candidates: Sequence[str], tol: float = DEFAULT_TOL,
                backend: str = "simplex", deadline_check=None) -> IisReport:
    """Deletion filter over the tagged ``candidates`` (ordered oldest to newest).

    Constraints whose tag is not a candidate are the fixed base system. The
    result is irreducible: dropping any one reported tag makes the program
    feasible. ``deadline_check`` is called between solves and may raise.
    """
    lp = LinearProgram(np.zeros(lp.n_vars), lp.lower, lp.upper, lp.constraints, lp.names)
    candidates = list(dict.fromkeys(candidates))
    full = solve(lp, tol, backend)
    if full.status is not Status.INFEASIBLE:
        raise NotInfeasibleError("program is feasible; no IIS exists")

    def infeasible_without(removed):
        if deadline_check is not None:
            deadline_check()
        out = solve(without_tags(lp, removed), tol, backend)
        return out if out.status is Status.INFEASIBLE else None

    def shrink(current, outcome):
        # the phase-1 multipliers point at an infeasible subsystem; confirm the cut
        support = set(outcome.infeasibility_witness)
        narrowed = [c for c in current if c in support]
        if len(narrowed) == len(current):
            return current, outcome
        cut = infeasible_without([c for c in candidates if c not in narrowed])
        return (narrowed, cut) if cut is not None else (current, outcome)

    current, _ = shrink(candidates, full)
    for tag in reversed(candidates):
        if tag not in current:
            continue
        trial = [t for t in current if t != tag]
        outcome = infeasible_without([t for t in candidates if t not in trial])
        if outcome is not None:
            current, _ = shrink(trial, outcome)
    if not current:
        raise BaseInfeasibleError("program is infeasible without any candidate constraint")
    return IisReport(tuple(current))


# --------------------------------------------------------------------------- text dump

def _fmt_terms(coeffs, names) -> str:
    terms = []
    for c, nm in zip(coeffs, names):
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        terms.append(f"{sign} {abs(c):.17g} {nm}")
    if not terms:
        return "0 " + names[0] if names else "0"
    text = " ".join(terms)
    return text[2:] if text.startswith("+ ") else text


def to_lp_text(lp: LinearProgram) -> str:
    """CPLEX-style LP text, for cross-checking against external solvers."""
    names = list(lp.names) if lp.names else [f"x{j}" for j in range(lp.n_vars)]
    out = ["\\ relaxed verification program", "Minimize", " obj: " + _fmt_terms(lp.objective, names),
           "Subject To"]
    for i, con in enumerate(lp.constraints):
        label = (con.tag or f"c{i}").replace("[", "_").replace("]", "").replace(",", "_")
        out.append(f" {label}_{i}: {_fmt_terms(con.coeffs, names)} {con.sense} {con.rhs:.17g}")
    out.append("Bounds")
    for nm, lo, hi in zip(names, lp.lower, lp.upper):
        lo_s = "-inf" if not np.isfinite(lo) else f"{lo:.17g}"
        hi_s = "+inf" if not np.isfinite(hi) else f"{hi:.17g}"
        out.append(f" {lo_s} <= {nm} <= {hi_s}")
    out.append("End")
    return "\n".join(out) + "\n"

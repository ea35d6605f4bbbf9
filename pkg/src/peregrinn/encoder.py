"""Slack-relaxed linear program for a verification query.

Variables are the query input ``x`` (free) followed by one non-negative slack
per ReLU neuron, layer by layer. Every slack sits above both ReLU branches;
conditioning a neuron pins its slack to one branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from . import lp as lpmod
from .errors import InconsistentDecisionsError, ShapeError
from .nn import Network, Phase
from .query import VerificationQuery

DEFAULT_WEIGHT_CAP = 1e6
INDETERMINACY_TOL = 1e-6


class Origin(str, Enum):
    SEARCH = "SEARCH"
    INFERRED = "INFERRED"


@dataclass(frozen=True)
class ConditioningDecision:
    layer: int
    neuron: int
    phase: Phase
    origin: Origin = Origin.SEARCH

    @property
    def key(self) -> tuple:
        return (self.layer, self.neuron)

    @property
    def tag(self) -> str:
        prefix = "cond" if self.origin is Origin.SEARCH else "inf"
        return f"{prefix}[{self.layer},{self.neuron}]"


@dataclass(frozen=True, eq=False)
class RelaxedProgram:
    lp: lpmod.LinearProgram
    net: Network  # input map already folded in
    input_vars: np.ndarray
    var_index: dict  # (layer, neuron) -> slack variable id
    conditioning_tags: dict  # ConditioningDecision -> tuple of constraint tags
    _pre_rows: tuple = field(repr=False, default=())  # per layer: (matrix over vars, const)

    @property
    def decided(self) -> set:
        return {d.key for d in self.conditioning_tags}

    def preactivations(self, sol) -> list:
        sol = np.asarray(sol, dtype=float)
        return [m @ sol + c for m, c in self._pre_rows]

    def slacks(self, sol) -> list:
        sol = np.asarray(sol, dtype=float)
        out, start = [], len(self.input_vars)
        for w in self.net.relu_widths:
            out.append(sol[start:start + w])
            start += w
        return out

    def output(self, sol) -> np.ndarray:
        if self.net.final_relu:
            return self.slacks(sol)[-1]
        return self.preactivations(sol)[-1]

    def search_tags(self) -> list:
        return [tags[0] for d, tags in self.conditioning_tags.items() if d.origin is Origin.SEARCH]


def layer_weights(n: int, ratio: float | None = None, cap: float = DEFAULT_WEIGHT_CAP) -> np.ndarray:
    """Geometric slack weights, heaviest on the earliest layer: ``q_i = ratio**(n-i)``.

    The ratio is clipped so that ``max(q) / min(q) <= cap``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    limit = cap ** (1.0 / max(n - 1, 1))
    ratio = limit if ratio is None else min(float(ratio), limit)
    if ratio <= 1.0:
        raise ValueError("ratio must exceed 1")
    return ratio ** np.arange(n - 1, -1, -1, dtype=float)


def encode(net: Network, query: VerificationQuery, decisions: Iterable[ConditioningDecision] = (),
           weights=None) -> RelaxedProgram:
    query.validate_for(net)
    eff = net.with_input_map(query.input_map)
    n_relu = eff.n_relu_layers
    if weights is None:
        weights = layer_weights(max(n_relu, 1))
    weights = np.asarray(weights, dtype=float)
    if n_relu and (weights.shape != (n_relu,) or np.any(weights <= 0)):
        raise ValueError(f"need {n_relu} positive layer weights")

    decisions = list(decisions)
    seen = {}
    for dec in decisions:
        i, j = dec.key
        if not (1 <= i <= n_relu and 0 <= j < eff.relu_widths[i - 1]):
            raise ShapeError(f"decision on nonexistent neuron ({i}, {j})")
        if dec.key in seen:
            raise InconsistentDecisionsError(f"two decisions on neuron {dec.key}")
        seen[dec.key] = dec

    d = eff.input_dim
    widths = eff.relu_widths
    n_vars = d + sum(widths)
    input_vars = np.arange(d)
    starts = np.cumsum([d] + list(widths))
    var_index = {(i, j): int(starts[i - 1] + j) for i in range(1, n_relu + 1)
                 for j in range(widths[i - 1])}

    lower = np.concatenate([np.full(d, -np.inf), np.zeros(n_vars - d)])
    upper = np.full(n_vars, np.inf)
    objective = np.zeros(n_vars)
    for i in range(1, n_relu + 1):
        objective[starts[i - 1]:starts[i]] = weights[i - 1]

    # pre-activation of every layer as an affine function of the LP variables
    pre_rows = []
    for i, layer in enumerate(eff.layers, start=1):
        m = np.zeros((layer.out_dim, n_vars))
        if i == 1:
            m[:, :d] = layer.weights
        else:
            m[:, starts[i - 2]:starts[i - 1]] = layer.weights
        pre_rows.append((m, layer.bias.copy()))

    cons = []
    for i in range(1, n_relu + 1):
        m, c = pre_rows[i - 1]
        for j in range(widths[i - 1]):
            row = m[j].copy()
            row[var_index[(i, j)]] -= 1.0
            cons.append(lpmod.Constraint(row, "<=", -c[j], f"relax[{i},{j}]"))

    in_poly = query.input_polytope()
    for r, (row, rhs) in enumerate(zip(in_poly.a_matrix, in_poly.b_vector)):
        coeffs = np.zeros(n_vars)
        coeffs[:d] = row
        cons.append(lpmod.Constraint(coeffs, "<=", rhs, f"input[{r}]"))

    if eff.final_relu:
        k = widths[-1]
        z_mat = np.zeros((k, n_vars))
        z_mat[:, starts[-2]:starts[-1]] = np.eye(k)
        z_const = np.zeros(k)
    else:
        z_mat, z_const = pre_rows[-1]
    viol = query.violation_set
    for r, (row, rhs) in enumerate(zip(viol.a_matrix, viol.b_vector)):
        cons.append(lpmod.Constraint(row @ z_mat, "<=", rhs - row @ z_const, f"violation[{r}]"))
    if query.coupled is not None:
        cp = query.coupled
        for r in range(cp.n_rows):
            coeffs = cp.gz[r] @ z_mat
            coeffs[:d] += cp.gx[r]
            cons.append(lpmod.Constraint(coeffs, "<=", cp.g[r] - cp.gz[r] @ z_const,
                                         f"coupled[{r}]"))

    cond_tags = {}
    for dec in decisions:
        i, j = dec.key
        m, c = pre_rows[i - 1]
        y = var_index[(i, j)]
        tag = dec.tag
        if dec.phase == Phase.ACTIVE:
            row = -m[j].copy()
            row[y] += 1.0
            cons.append(lpmod.Constraint(row, "=", c[j], tag))
        else:
            e = np.zeros(n_vars)
            e[y] = 1.0
            cons.append(lpmod.Constraint(e, "=", 0.0, tag))
            cons.append(lpmod.Constraint(m[j].copy(), "<=", -c[j], tag))
        cond_tags[dec] = (tag,)

    names = tuple([f"x{k}" for k in range(d)] +
                  [f"y_{i}_{j}" for (i, j) in sorted(var_index, key=var_index.get)])
    prog = lpmod.LinearProgram(objective, lower, upper, tuple(cons), names)
    return RelaxedProgram(prog, eff, input_vars, var_index, cond_tags, tuple(pre_rows))


def slack_gaps(prog: RelaxedProgram, sol) -> list:
    """Per ReLU layer: ``slack - max(0, pre-activation)``."""
    pre = prog.preactivations(sol)
    return [s - np.maximum(p, 0.0) for s, p in zip(prog.slacks(sol), pre)]


def indeterminate_neurons(prog: RelaxedProgram, sol, tol: float = INDETERMINACY_TOL) -> list:
    """Unconditioned neurons whose slack sits strictly above both ReLU branches.

    Sorted by layer, then by decreasing gap.
    """
    decided = prog.decided
    found = []
    for i, gap in enumerate(slack_gaps(prog, sol), start=1):
        for j in np.flatnonzero(gap > tol):
            if (i, int(j)) not in decided:
                found.append((i, int(j), float(gap[j])))
    found.sort(key=lambda t: (t[0], -t[2], t[1]))
    return [(i, j) for i, j, _ in found]


def extract_candidate_input(prog: RelaxedProgram, sol) -> np.ndarray:
    """The query-input block of an LP solution (input map not applied)."""
    return np.asarray(sol, dtype=float)[prog.input_vars].copy()

"""User-level properties compiled into batches of verification queries.

Two families are supported: local robustness of a classifier in a max-norm
ball, and one-step safety of a linear plant driven by a network controller.
Each compiles to independent queries whose verdicts are aggregated here.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import ParseError, ShapeError
from .geometry import Box, Polytope, as_polytope
from .nn import AffineMap, Network, forward
from .query import (CoupledConstraints, VerificationQuery, polytope_from_dict, query_from_dict,
                    region_from_dict)
from .search import Verdict, VerdictStatus, VerifierConfig, verify, verify_many

__all__ = [
    "VerificationQuery", "RobustnessSpec", "ClosedLoopSpec", "RobustnessStatus",
    "RobustnessResult", "ClosedLoopResult", "robustness_queries", "check_robustness",
    "closed_loop_queries", "check_closed_loop", "grid_workspace", "property_from_dict",
    "load_property",
]


# --------------------------------------------------------------------------- robustness

@dataclass(frozen=True, eq=False)
class RobustnessSpec:
    """Every input within ``epsilon`` (max-norm) of ``anchor`` keeps class ``true_class``."""

    anchor: np.ndarray
    epsilon: float
    true_class: int
    num_classes: int
    clip: Box | None = None

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=float).reshape(-1)
        object.__setattr__(self, "anchor", anchor)
        if not np.all(np.isfinite(anchor)):
            raise ValueError("anchor must be finite")
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError("epsilon must be a finite non-negative number")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.true_class < self.num_classes:
            raise ValueError(f"true_class {self.true_class} outside [0, {self.num_classes})")
        if self.clip is not None and self.clip.dim != anchor.shape[0]:
            raise ShapeError("clip box dimension differs from the anchor")

    def input_box(self) -> Box:
        lo = self.anchor - self.epsilon
        hi = self.anchor + self.epsilon
        if self.clip is not None:
            lo = np.maximum(lo, self.clip.lower)
            hi = np.minimum(hi, self.clip.upper)
        return Box(lo, hi)


def _argmax_rows(m: int, n_classes: int) -> Polytope:
    """Rows ``z_i - z_m <= 0`` for every ``i != m``: class ``m`` is (weakly) maximal."""
    rows = []
    for i in range(n_classes):
        if i == m:
            continue
        r = np.zeros(n_classes)
        r[i], r[m] = 1.0, -1.0
        rows.append(r)
    return Polytope(np.array(rows), np.zeros(len(rows)))


def robustness_queries(spec: RobustnessSpec) -> list:
    """One query per rival class ``m != t``, in increasing ``m``."""
    box = spec.input_box()
    return [VerificationQuery(box, _argmax_rows(m, spec.num_classes))
            for m in range(spec.num_classes) if m != spec.true_class]


class RobustnessStatus(str, Enum):
    ROBUST = "ROBUST"
    NOT_ROBUST = "NOT_ROBUST"
    UNKNOWN = "UNKNOWN"


@dataclass
class RobustnessResult:
    status: RobustnessStatus
    witness: np.ndarray | None = None
    witness_class: int | None = None
    verdicts: dict = field(default_factory=dict)  # rival class -> Verdict

    @property
    def reason(self):
        reasons = [v.reason for v in self.verdicts.values() if v.reason is not None]
        return reasons[0] if reasons and self.status is RobustnessStatus.UNKNOWN else None


def check_robustness(net: Network, spec: RobustnessSpec, cfg: VerifierConfig | None = None,
                     jobs: int = 1) -> RobustnessResult:
    if net.output_dim != spec.num_classes:
        raise ShapeError(f"network has {net.output_dim} outputs, spec has {spec.num_classes} classes")
    rivals = [m for m in range(spec.num_classes) if m != spec.true_class]
    queries = robustness_queries(spec)
    verdicts = {}
    if jobs <= 1:
        for m, q in zip(rivals, queries):
            verdicts[m] = verify(net, q, cfg)
            if verdicts[m].status is VerdictStatus.UNSAFE:
                break
    else:
        verdicts = dict(zip(rivals, verify_many(net, queries, cfg, jobs)))
    for m, v in verdicts.items():
        if v.status is VerdictStatus.UNSAFE:
            return RobustnessResult(RobustnessStatus.NOT_ROBUST, v.witness_input, m, verdicts)
    if all(v.status is VerdictStatus.SAFE for v in verdicts.values()):
        return RobustnessResult(RobustnessStatus.ROBUST, verdicts=verdicts)
    return RobustnessResult(RobustnessStatus.UNKNOWN, verdicts=verdicts)


# --------------------------------------------------------------------------- closed loop

@dataclass(frozen=True, eq=False)
class ClosedLoopSpec:
    """Plant ``x+ = A x + B u`` with controller ``u = NN(H x + d)``.

    A query asks whether a state in ``regions[m]`` can step into ``obstacles[t]``.
    """

    regions: tuple
    obstacles: tuple
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    observation: AffineMap

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        b = np.atleast_2d(np.asarray(self.b_matrix, dtype=float))
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        n = a.shape[0]
        if a.shape != (n, n):
            raise ShapeError(f"A must be square, got {a.shape}")
        if b.shape[0] != n:
            raise ShapeError(f"B has {b.shape[0]} rows, state dimension is {n}")
        if self.observation.in_dim != n:
            raise ShapeError(f"H reads {self.observation.in_dim} states, state dimension is {n}")
        for name, group in (("region", self.regions), ("obstacle", self.obstacles)):
            for k, poly in enumerate(group):
                if poly.dim != n:
                    raise ShapeError(f"{name} {k} has dimension {poly.dim}, expected {n}")

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]

    def successor(self, net: Network, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u, _, _ = forward(net, self.observation(x))
        return self.a_matrix @ x + self.b_matrix @ u


def closed_loop_queries(spec: ClosedLoopSpec) -> list:
    """Queries for every (region, obstacle) pair, region-major."""
    out = []
    k = spec.b_matrix.shape[1]
    for region in spec.regions:
        for obstacle in spec.obstacles:
            obs = as_polytope(obstacle)
            coupled = CoupledConstraints(obs.a_matrix @ spec.a_matrix,
                                         obs.a_matrix @ spec.b_matrix, obs.b_vector)
            out.append(VerificationQuery(region, Polytope.universe(k), spec.observation, coupled))
    return out


@dataclass
class ClosedLoopResult:
    verdicts: dict  # (region index, obstacle index) -> Verdict

    @property
    def safe(self) -> bool:
        return all(v.status is VerdictStatus.SAFE for v in self.verdicts.values())

    def unsafe_pairs(self) -> list:
        return sorted(k for k, v in self.verdicts.items() if v.status is VerdictStatus.UNSAFE)


def check_closed_loop(net: Network, spec: ClosedLoopSpec, cfg: VerifierConfig | None = None,
                      jobs: int = 1) -> ClosedLoopResult:
    queries = closed_loop_queries(spec)
    keys = list(itertools.product(range(len(spec.regions)), range(len(spec.obstacles))))
    return ClosedLoopResult(dict(zip(keys, verify_many(net, queries, cfg, jobs))))


def grid_workspace(bounds: Box, epsilon: float) -> list:
    """Axis-aligned cells of side ``epsilon`` tiling ``bounds``; the last cell per
    axis may be thinner."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    axes = []
    for lo, hi in zip(bounds.lower, bounds.upper):
        n_cells = max(1, math.ceil((hi - lo) / epsilon - 1e-9))
        edges = [lo + i * epsilon for i in range(n_cells)] + [hi]
        axes.append(list(zip(edges[:-1], edges[1:])))
    cells = []
    for combo in itertools.product(*axes):
        lo = np.array([c[0] for c in combo])
        hi = np.array([c[1] for c in combo])
        cells.append(Box(lo, hi).to_polytope())
    return cells


# --------------------------------------------------------------------------- property files

Property = Union[RobustnessSpec, ClosedLoopSpec, VerificationQuery]


def _box_or_none(data):
    if data is None:
        return None
    region = region_from_dict(data)
    if not isinstance(region, Box):
        raise ParseError("clip must be a box with lower/upper")
    return region


def property_from_dict(data: dict, net: Network) -> Property:
    if not isinstance(data, dict):
        raise ParseError("property must be a JSON object")
    kind = data.get("type")
    try:
        if kind == "robustness":
            spec = RobustnessSpec(data["anchor"], float(data["epsilon"]), int(data["true_class"]),
                                  int(data.get("num_classes", net.output_dim)),
                                  _box_or_none(data.get("clip")))
            if spec.anchor.shape[0] != net.input_dim:
                raise ShapeError(f"anchor has dimension {spec.anchor.shape[0]}, "
                                 f"network expects {net.input_dim}")
            return spec
        if kind == "closed_loop":
            a = np.atleast_2d(np.asarray(data["A"], dtype=float))
            n = a.shape[0]
            h = data.get("H", np.eye(n).tolist())
            d = data.get("d", [0.0] * len(h))
            spec = ClosedLoopSpec([polytope_from_dict(r, n) for r in data["regions"]],
                                  [polytope_from_dict(o, n) for o in data["obstacles"]],
                                  a, data["B"], AffineMap(h, d))
            for q in closed_loop_queries(spec):
                q.validate_for(net)
            return spec
        if kind == "raw":
            return query_from_dict(data, net)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed {kind} property: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, (ParseError, ShapeError)):
            raise
        raise ParseError(f"invalid {kind} property: {exc}") from exc
    raise ParseError(f"unknown property type {kind!r}")


def load_property(path, net: Network) -> Property:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    return property_from_dict(data, net)


def queries_for(prop: Property) -> list:
    """Flatten any property into its query list."""
    if isinstance(prop, RobustnessSpec):
        return robustness_queries(prop)
    if isinstance(prop, ClosedLoopSpec):
        return closed_loop_queries(prop)
    return [prop]


def verdict_summary(verdicts: Sequence[Verdict]) -> dict:
    counts = {s: 0 for s in VerdictStatus}
    for v in verdicts:
        counts[v.status] += 1
    return {"total": len(verdicts), "safe": counts[VerdictStatus.SAFE],
            "unsafe": counts[VerdictStatus.UNSAFE], "unknown": counts[VerdictStatus.UNKNOWN]}

"""Conditioning search over indeterminate neurons.

Each iteration runs interval inference under the current decisions, solves the
relaxed program, then either conditions one more neuron (shallowest layer
first, smallest activation-region volume within the layer) or backtracks using
an irreducible infeasible subset of the decisions.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import lp as lpmod
from .encoder import (ConditioningDecision, Origin, encode, extract_candidate_input,
                      indeterminate_neurons, layer_weights, slack_gaps)
from .errors import BaseInfeasibleError, NotInfeasibleError, NumericError, SamplingError
from .geometry import (Hyperplane, Polytope, contains, halfspace_rows, sample_domain,
                       sign_pattern_feasible, volume_fraction)
from .interval import BranchInfeasible, PhaseMap, Provenance, infer_phases, symbolic_analysis
from .nn import UNFIXED, Network, Phase, fold_affine, forward
from .query import VerificationQuery

log = logging.getLogger(__name__)

WITNESS_TOL = 1e-6


class VerdictStatus(str, Enum):
    SAFE = "SAFE"
    UNSAFE = "UNSAFE"
    UNKNOWN = "UNKNOWN"


class UnknownReason(str, Enum):
    TIMEOUT = "TIMEOUT"
    RESOURCE = "RESOURCE"
    NUMERIC = "NUMERIC"


@dataclass
class VerifierConfig:
    timeout: float = 1200.0
    volume_samples: int = 2000
    lp_tol: float = 1e-7
    indeterminacy_tol: float = 1e-6
    weight_ratio_cap: float = 1e6
    seed: int = 42
    max_lp_solves: int = 10**6
    branching: str = "volume"  # "volume" or "random"
    lp_backend: str = "simplex"

    def __post_init__(self):
        for name in ("timeout", "volume_samples", "lp_tol", "indeterminacy_tol",
                     "weight_ratio_cap", "max_lp_solves"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.weight_ratio_cap <= 1:
            raise ValueError("weight_ratio_cap must exceed 1")
        if self.branching not in ("volume", "random"):
            raise ValueError("branching must be 'volume' or 'random'")


@dataclass
class SearchStats:
    lp_solves: int = 0
    aux_lp_solves: int = 0
    backtracks: int = 0
    inferences: int = 0
    iterations: int = 0
    post_conditioning_checks: int = 0
    depth_violations: int = 0
    forced_conditionings: int = 0
    spurious_repairs: int = 0
    prefix_conditionings: int = 0
    max_depth: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StackEntry:
    decision: ConditioningDecision
    tried: set = field(default_factory=set)


@dataclass
class SearchState:
    stack: list = field(default_factory=list)
    stats: SearchStats = field(default_factory=SearchStats)

    def decisions(self) -> list:
        return [e.decision for e in self.stack]

    def push(self, layer: int, neuron: int, phase: Phase) -> None:
        dec = ConditioningDecision(layer, neuron, Phase(phase), Origin.SEARCH)
        assert all(e.decision.key != dec.key for e in self.stack)
        self.stack.append(StackEntry(dec, {dec.phase}))
        self.stats.max_depth = max(self.stats.max_depth, len(self.stack))

    def assignment(self) -> tuple:
        return tuple(sorted((e.decision.layer, e.decision.neuron, int(e.decision.phase))
                            for e in self.stack))


@dataclass
class Verdict:
    status: VerdictStatus
    witness_input: np.ndarray | None = None
    witness_output: np.ndarray | None = None
    reason: UnknownReason | None = None
    stats: SearchStats = field(default_factory=SearchStats)
    elapsed: float = 0.0

    def to_dict(self, timestamps: bool = True) -> dict:
        out = {"verdict": self.status.value,
               "reason": self.reason.value if self.reason else None,
               "witness": None}
        if self.witness_input is not None:
            out["witness"] = {"input": self.witness_input.tolist(),
                              "output": self.witness_output.tolist()}
        out.update(lp_solves=self.stats.lp_solves, backtracks=self.stats.backtracks,
                   inferred_fixes=self.stats.inferences)
        out["wall_time_s"] = round(self.elapsed, 6) if timestamps else None
        return out


class _Timeout(Exception):
    pass


class NoCandidate(Exception):
    """Every (neuron, phase) candidate was pruned as geometrically impossible."""


BASE_INFEASIBLE = "BASE_INFEASIBLE"
EXHAUSTED = "EXHAUSTED"


# --------------------------------------------------------------------------- witness

def validate_witness(net: Network, query: VerificationQuery, x, tol: float = WITNESS_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (query.ambient_dim,) or not np.all(np.isfinite(x)):
        return False
    if not contains(query.input_set, x, tol):
        return False
    nn_in = query.input_map(x) if query.input_map is not None else x
    z, _, _ = forward(net, nn_in)
    if not contains(query.violation_set, z, tol):
        return False
    if query.coupled is not None and not query.coupled.holds(x, z, tol):
        return False
    return True


# --------------------------------------------------------------------------- backtracking

def backtrack(state: SearchState, iis):
    """Undo decisions after an infeasible query.

    ``iis`` is an ``IisReport``, ``None`` (no usable subsystem: fall back to the
    top entry) or ``BASE_INFEASIBLE``. Returns ``state`` or ``EXHAUSTED``.
    """
    stack = state.stack
    state.stats.backtracks += 1
    if not stack or iis == BASE_INFEASIBLE:
        stack.clear()
        return EXHAUSTED
    idx = len(stack) - 1
    if iis is not None:
        tags = set(iis.tags)
        hits = [k for k, e in enumerate(stack) if e.decision.tag in tags]
        if hits:
            idx = hits[-1]
    del stack[idx + 1:]
    while stack:
        top = stack[-1]
        other = Phase(1 - int(top.decision.phase))
        if other not in top.tried:
            top.decision = replace(top.decision, phase=other)
            top.tried.add(other)
            return state
        stack.pop()
    return EXHAUSTED


# --------------------------------------------------------------------------- neuron choice

def _layer_planes(net: Network, pattern, layer: int):
    fold = fold_affine(net, pattern, layer - 1)
    w, b = net.layers[layer - 1].weights, net.layers[layer - 1].bias
    return w @ fold.matrix, w @ fold.offset + b


def pick_neuron(indeterminates, net: Network, pattern, fixed: PhaseMap, samples: np.ndarray,
                domain: Polytope, cfg: VerifierConfig, rng: np.random.Generator | None = None,
                on_lp: Callable | None = None):
    """Choose the next ``(layer, neuron, phase)`` to condition.

    ``pattern`` fixes every neuron shallower than the candidates' layer (from
    decisions, inference, or the LP solution); ``fixed`` carries provenance.
    """
    if not indeterminates:
        raise ValueError("no indeterminate neurons to choose from")
    layer = min(i for i, _ in indeterminates)
    cands = [j for i, j in indeterminates if i == layer]
    if cfg.branching == "random":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        j = cands[int(rng.integers(len(cands)))]
        return layer, j, Phase(int(rng.integers(2)))

    normals, offsets = _layer_planes(net, pattern, layer)

    # region reachable under the fixed prefix: input set plus prefix half-spaces
    prefix_a, prefix_b = [domain.a_matrix], [domain.b_vector]
    for l in range(1, layer):
        pn, po = _layer_planes(net, pattern, l)
        sign = np.where(np.asarray(pattern[l - 1]) == Phase.ACTIVE, 1.0, -1.0)
        prefix_a.append(-sign[:, None] * pn)
        prefix_b.append(sign * po)
    prefix = Polytope(np.vstack(prefix_a), np.concatenate(prefix_b))
    prefix_exact = all(np.all(pv != Provenance.FREE) for pv in fixed.provenance[: layer - 1])

    same_layer = []
    ph_l = fixed.phases[layer - 1]
    for k in np.flatnonzero(ph_l != UNFIXED):
        same_layer.append((Hyperplane(normals[k], offsets[k]), 1 if ph_l[k] == Phase.ACTIVE else -1))
    region = prefix.intersect(halfspace_rows(same_layer, net.input_dim))

    pts = samples
    if pts.shape[0]:
        inside = np.all(pts @ region.a_matrix.T <= region.b_vector, axis=1)
        pts = pts[inside]
    vol_pts = pts if pts.shape[0] else samples

    survivors = []
    for j in cands:
        plane = Hyperplane(normals[j], offsets[j])
        vals = plane.evaluate(pts) if pts.shape[0] else np.zeros(0)
        for phase, sign in ((Phase.ACTIVE, 1), (Phase.INACTIVE, -1)):
            if np.any(sign * vals >= 0):
                ok = True
            else:
                if on_lp is not None:
                    on_lp()
                ok = sign_pattern_feasible(same_layer + [(plane, sign)], prefix,
                                           lp_tol=cfg.lp_tol)
            if ok:
                survivors.append((j, phase, plane, sign))
    if not survivors:
        if prefix_exact:
            raise NoCandidate()
        survivors = [(j, ph, Hyperplane(normals[j], offsets[j]), s)
                     for j in cands for ph, s in ((Phase.ACTIVE, 1), (Phase.INACTIVE, -1))]

    def key(item):
        j, phase, plane, sign = item
        vol = volume_fraction(plane, sign, vol_pts) if vol_pts.shape[0] else 0.0
        return (vol, j, 0 if phase == Phase.ACTIVE else 1)

    j, phase, _, _ = min(survivors, key=key)
    return layer, j, phase


# --------------------------------------------------------------------------- main loop

def _draw_samples(query: VerificationQuery, cfg: VerifierConfig) -> np.ndarray:
    region = query.input_set
    try:
        return sample_domain(region, cfg.volume_samples, cfg.seed)
    except SamplingError:
        box = region.bounding_box()
        pts = sample_domain(box, cfg.volume_samples, cfg.seed)
        poly = query.input_polytope()
        return pts[np.all(pts @ poly.a_matrix.T <= poly.b_vector, axis=1)]


def _inferred_decisions(pm: PhaseMap) -> list:
    return [ConditioningDecision(i, j, ph, Origin.INFERRED)
            for i, j, ph in pm.entries(Provenance.INFERRED)]


def _with_overlay(net: Network, decisions, overlay: list) -> PhaseMap:
    pm = PhaseMap.from_decisions(net, [(d.layer, d.neuron, d.phase) for d in decisions])
    for d in overlay:
        i, j = d.key
        if pm.provenance[i - 1][j] == Provenance.FREE:
            pm.phases[i - 1][j] = int(d.phase)
            pm.provenance[i - 1][j] = Provenance.INFERRED
    return pm


def verify(net: Network, query: VerificationQuery, cfg: VerifierConfig | None = None,
           trace: Callable[[dict], None] | None = None) -> Verdict:
    """Decide whether some input of ``query`` drives ``net`` into the violation set."""
    cfg = cfg or VerifierConfig()
    t0 = time.perf_counter()
    deadline = t0 + cfg.timeout
    query.validate_for(net)
    eff = net.with_input_map(query.input_map)
    state = SearchState()
    stats = state.stats

    def finish(status, x=None, z=None, reason=None):
        return Verdict(status, x, z, reason, stats, time.perf_counter() - t0)

    def check_deadline():
        if time.perf_counter() > deadline:
            raise _Timeout()

    def count_aux():
        stats.aux_lp_solves += 1
        check_deadline()

    try:
        return _search(net, eff, query, cfg, state, finish, check_deadline, count_aux, trace)
    except _Timeout:
        return finish(VerdictStatus.UNKNOWN, reason=UnknownReason.TIMEOUT)
    except NumericError as exc:
        log.warning("numeric failure: %s", exc)
        return finish(VerdictStatus.UNKNOWN, reason=UnknownReason.NUMERIC)


def _search(net, eff, query, cfg, state, finish, check_deadline, count_aux, trace):
    stats = state.stats
    check_deadline()
    box = query.input_box()
    domain = query.input_polytope()
    weights = layer_weights(max(eff.n_relu_layers, 1), cap=cfg.weight_ratio_cap)
    samples = _draw_samples(query, cfg)
    rng = np.random.default_rng(cfg.seed)

    free = PhaseMap.free(eff)
    root_inferred = _inferred_decisions(infer_phases(symbolic_analysis(eff, box, free), free))

    def emit(**rec):
        if trace is not None:
            rec["iteration"] = stats.iterations
            rec["depth"] = len(state.stack)
            rec["stack"] = [[e.decision.layer, e.decision.neuron, int(e.decision.phase)]
                            for e in state.stack]
            trace(rec)

    def conflict():
        decided = state.decisions()
        prog = encode(net, query, decided + root_inferred, weights)
        try:
            return lpmod.extract_iis(prog.lp, [d.tag for d in decided], cfg.lp_tol,
                                     cfg.lp_backend, deadline_check=count_aux)
        except NotInfeasibleError:
            return None
        except BaseInfeasibleError:
            return BASE_INFEASIBLE

    def on_infeasible(kind):
        if not state.stack:
            emit(event="safe", lp_status=kind)
            return finish(VerdictStatus.SAFE)
        iis = conflict()
        emit(event="backtrack", lp_status=kind,
             iis=list(iis.tags) if isinstance(iis, lpmod.IisReport) else iis)
        if backtrack(state, iis) == EXHAUSTED:
            return finish(VerdictStatus.SAFE)
        return None

    while True:
        check_deadline()
        if stats.lp_solves >= cfg.max_lp_solves:
            return finish(VerdictStatus.UNKNOWN, reason=UnknownReason.RESOURCE)
        stats.iterations += 1
        decided = state.decisions()
        fixed = _with_overlay(eff, decided, root_inferred)
        try:
            bounds = symbolic_analysis(eff, box, fixed)
            phases = infer_phases(bounds, fixed)
        except BranchInfeasible:
            done = on_infeasible("BRANCH_INFEASIBLE")
            if done is not None:
                return done
            continue
        inferred = _inferred_decisions(phases)
        stats.inferences += len(inferred)
        prog = encode(net, query, decided + inferred, weights)
        outcome = lpmod.solve(prog.lp, cfg.lp_tol, cfg.lp_backend)
        stats.lp_solves += 1

        if outcome.status is lpmod.Status.INFEASIBLE:
            done = on_infeasible("INFEASIBLE")
            if done is not None:
                return done
            continue
        if outcome.status is lpmod.Status.UNBOUNDED:
            return finish(VerdictStatus.UNKNOWN, reason=UnknownReason.NUMERIC)

        sol = outcome.solution
        indet = indeterminate_neurons(prog, sol, cfg.indeterminacy_tol)
        violation = False
        if state.stack:
            stats.post_conditioning_checks += 1
            deepest = max(d.layer for d in decided)
            if indet and min(i for i, _ in indet) < deepest:
                violation = True
                stats.depth_violations += 1
                log.debug("indeterminate neuron shallower than layer %d", deepest)

        if not indet:
            x = extract_candidate_input(prog, sol)
            if validate_witness(net, query, x):
                nn_in = query.input_map(x) if query.input_map is not None else x
                z, _, _ = forward(net, nn_in)
                emit(event="unsafe", lp_status="OPTIMAL", objective=outcome.objective_value,
                     n_indeterminate=0)
                return finish(VerdictStatus.UNSAFE, x, z)
            # numerically spurious: condition the worst unconditioned neuron
            conditioned = prog.decided
            pre = prog.preactivations(sol)
            best, best_gap = None, -1.0
            for i, gap in enumerate(slack_gaps(prog, sol), start=1):
                for j in range(gap.shape[0]):
                    if (i, j) not in conditioned and abs(gap[j]) > best_gap:
                        best, best_gap = (i, j), abs(gap[j])
            if best is None:
                return finish(VerdictStatus.UNKNOWN, reason=UnknownReason.NUMERIC)
            i, j = best
            stats.spurious_repairs += 1
            state.push(i, j, Phase.ACTIVE if pre[i - 1][j] > 0 else Phase.INACTIVE)
            emit(event="spurious", lp_status="OPTIMAL", objective=outcome.objective_value,
                 n_indeterminate=0)
            continue

        # complete the phase pattern from the LP solution for the fixed-prefix fold
        pre = prog.preactivations(sol)
        pattern = tuple(np.where(ph == UNFIXED, (pre[i] > 0).astype(np.int8), ph)
                        for i, ph in enumerate(phases.phases))

        # Free neurons shallower than every indeterminate one are tight in this
        # solution. Condition them to their LP phase before going deeper, so the
        # search never holds a decision below an undecided layer. The current
        # solution satisfies these rows, so no re-solve is needed.
        top = indet[0][0]
        shallow = [(i, int(j)) for i in range(1, top)
                   for j in np.flatnonzero(phases.phases[i - 1] == UNFIXED)]
        if shallow:
            phases = phases.copy()
            for i, j in shallow:
                ph = Phase(int(pattern[i - 1][j]))
                state.push(i, j, ph)
                phases.phases[i - 1][j] = int(ph)
                phases.provenance[i - 1][j] = Provenance.DECIDED
            stats.prefix_conditionings += len(shallow)
        try:
            layer, neuron, phase = pick_neuron(indet, eff, pattern, phases, samples, domain,
                                               cfg, rng, on_lp=count_aux)
        except NoCandidate:
            done = on_infeasible("NO_CANDIDATE")
            if done is not None:
                return done
            continue
        if violation:
            stats.forced_conditionings += 1
        state.push(layer, neuron, phase)
        emit(event="condition", lp_status="OPTIMAL", objective=outcome.objective_value,
             n_indeterminate=len(indet), depth_violation=violation,
             chosen=[layer, neuron, int(phase)])


def _verify_job(args):
    net, query, cfg = args
    return verify(net, query, cfg)


def verify_many(net: Network, queries, cfg: VerifierConfig | None = None, jobs: int = 1) -> list:
    """Verify independent queries, optionally across ``jobs`` worker processes."""
    cfg = cfg or VerifierConfig()
    queries = list(queries)
    if jobs <= 1 or len(queries) <= 1:
        return [verify(net, q, cfg) for q in queries]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_verify_job, [(net, q, cfg) for q in queries]))

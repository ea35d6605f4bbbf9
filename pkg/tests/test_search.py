import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from peregrinn.encoder import ConditioningDecision
from peregrinn.geometry import Box, Polytope
from peregrinn.interval import PhaseMap
from peregrinn.lp import IisReport
from peregrinn.nn import AffineMap, Layer, Network, Phase, random_network
from peregrinn.oracle import exhaustive_check, random_instance
from peregrinn.query import CoupledConstraints, VerificationQuery
from peregrinn.search import (BASE_INFEASIBLE, EXHAUSTED, NoCandidate, SearchState, UnknownReason,
                              VerdictStatus, VerifierConfig, backtrack, pick_neuron,
                              validate_witness, verify, verify_many)

A, B, C = (1, 0), (1, 1), (2, 0)


def identity_net():
    return Network((Layer([[1.0]], [0.0]),), 1)


def at_least(t):
    return Polytope([[-1.0]], [-t])


def unit_query(t):
    return VerificationQuery(Box([0.0], [1.0]), at_least(t))


def stack_of(*entries):
    state = SearchState()
    for (i, j), phase, tried in entries:
        state.push(i, j, phase)
        state.stack[-1].tried = set(tried)
    return state


def iis_on(*keys):
    return IisReport(tuple(f"cond[{i},{j}]" for i, j in keys))


# --------------------------------------------------------------------------- validate_witness

def test_witness_examples():
    q = unit_query(0.5)
    assert validate_witness(identity_net(), q, [0.75])
    assert not validate_witness(identity_net(), q, [0.25])
    assert not validate_witness(identity_net(), q, [1.5])  # outside the input box
    assert not validate_witness(identity_net(), q, [0.75, 0.0])
    assert not validate_witness(identity_net(), q, [np.nan])


def test_witness_uses_input_map_and_coupling():
    net = identity_net()
    q = VerificationQuery(Box([0.0], [1.0]), at_least(1.5), input_map=AffineMap([[2.0]], [0.0]))
    assert validate_witness(net, q, [0.8]) and not validate_witness(net, q, [0.7])
    cp = CoupledConstraints([[1.0]], [[1.0]], [2.0])  # x + z <= 2
    q = VerificationQuery(Box([0.0], [1.0]), at_least(1.2), AffineMap([[2.0]], [0.0]), cp)
    assert validate_witness(net, q, [0.6]) and not validate_witness(net, q, [0.9])


# --------------------------------------------------------------------------- backtrack

def test_backtrack_flips_single_entry():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}))
    assert backtrack(state, iis_on(A)) is state
    e = state.stack[0]
    assert e.decision.phase == Phase.INACTIVE and e.tried == {Phase.ACTIVE, Phase.INACTIVE}


def test_backtrack_exhausted():
    both = {Phase.ACTIVE, Phase.INACTIVE}
    state = stack_of((A, Phase.INACTIVE, both), (B, Phase.INACTIVE, both))
    assert backtrack(state, iis_on(A)) == EXHAUSTED
    assert state.stack == []


def test_backtrack_jumps_over_unrelated_entries():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}), (B, Phase.ACTIVE, {Phase.ACTIVE}),
                     (C, Phase.ACTIVE, {Phase.ACTIVE}))
    backtrack(state, iis_on(A))
    assert [e.decision.key for e in state.stack] == [A]
    assert state.stack[0].decision.phase == Phase.INACTIVE


def test_backtrack_without_iis_uses_top():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}), (B, Phase.ACTIVE, {Phase.ACTIVE}))
    backtrack(state, None)
    assert [e.decision.phase for e in state.stack] == [Phase.ACTIVE, Phase.INACTIVE]


def test_backtrack_recurses_to_flippable_ancestor():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}),
                     (B, Phase.INACTIVE, {Phase.ACTIVE, Phase.INACTIVE}))
    backtrack(state, iis_on(B))
    assert [e.decision.key for e in state.stack] == [A]
    assert state.stack[0].decision.phase == Phase.INACTIVE


def test_backtrack_base_infeasible():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}))
    assert backtrack(state, BASE_INFEASIBLE) == EXHAUSTED


def test_push_rejects_duplicate_neuron():
    state = stack_of((A, Phase.ACTIVE, {Phase.ACTIVE}))
    with pytest.raises(AssertionError):
        state.push(*A, Phase.INACTIVE)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6))
def test_backtracking_never_revisits_an_assignment(seed, n):
    rng = np.random.default_rng(seed)
    neurons = [(1, j) for j in range(n)]
    state = SearchState()
    visited = set()

    def visit():
        a = state.assignment()
        assert a not in visited
        visited.add(a)

    for _ in range(10 * 2 ** n):
        used = {e.decision.key for e in state.stack}
        free = [k for k in neurons if k not in used]
        if free and rng.random() < 0.6:
            i, j = free[int(rng.integers(len(free)))]
            state.push(i, j, Phase(int(rng.integers(2))))
            visit()
            continue
        if not state.stack:
            break
        keys = [e.decision.key for e in state.stack]
        picked = [k for k in keys if rng.random() < 0.5]
        iis = iis_on(*picked) if picked else None
        if backtrack(state, iis) == EXHAUSTED:
            break
        visit()
        assert len(state.stack) <= n
        for e in state.stack:
            assert e.decision.phase in e.tried
    # a full binary tree over n neurons has fewer than 2^(n+1) nodes
    assert len(visited) < 2 ** (n + 1)


# --------------------------------------------------------------------------- pick_neuron

def one_layer(rows, biases):
    return Network((Layer([[r] for r in rows], biases), Layer([[1.0] * len(rows)], [0.0])), 1,
                   final_relu=False)


def pick(net, indet, decisions=(), branching="volume", box=(0.0, 1.0), pts=None):
    bx = Box([box[0]], [box[1]])
    if pts is None:
        pts = np.random.default_rng(0).uniform(box[0], box[1], size=(4000, 1))
    fixed = PhaseMap.from_decisions(net, decisions)
    pattern = tuple(np.where(p < 0, 0, p).astype(np.int8) for p in fixed.phases)
    cfg = VerifierConfig(branching=branching)
    return pick_neuron(indet, net, pattern, fixed, pts, bx.to_polytope(), cfg,
                       np.random.default_rng(1))


def test_pick_smaller_side():
    net = one_layer([1.0], [-0.7])  # active side x > 0.7 is 30% of [0, 1]
    assert pick(net, [(1, 0)]) == (1, 0, Phase.ACTIVE)
    net = one_layer([-1.0], [0.7])  # active side x < 0.7 is 70%
    assert pick(net, [(1, 0)]) == (1, 0, Phase.INACTIVE)


def test_pick_prefers_shallow_layer():
    net = Network((Layer([[1.0]], [-0.5]), Layer([[1.0]], [-0.001]), Layer([[1.0]], [0.0])), 1,
                  final_relu=False)
    assert pick(net, [(2, 0), (1, 0)])[:2] == (1, 0)


def test_pick_tie_breaks():
    net = one_layer([1.0, 1.0], [-0.5, -0.5])
    grid = np.linspace(0.0005, 0.9995, 1000)[:, None]  # symmetric about the shared plane
    assert pick(net, [(1, 1), (1, 0)], pts=grid) == (1, 0, Phase.ACTIVE)


def test_pick_prunes_incompatible_phase():
    # neuron 0 decided ACTIVE (x >= 0.5); neuron 1 ACTIVE means x <= 0.2
    net = one_layer([1.0, -1.0], [-0.5, 0.2])
    res = linprog([0.0], A_ub=[[-1.0], [1.0]], b_ub=[-0.5, 0.2], bounds=[(0, 1)], method="highs")
    assert res.status == 2  # the half-space system is empty
    assert pick(net, [(1, 1)], [(1, 0, Phase.ACTIVE)]) == (1, 1, Phase.INACTIVE)


def test_pick_no_candidate():
    # decided neurons 0 and 2 already contradict: x >= 0.5 and x <= 0.2
    net = one_layer([1.0, 1.0, -1.0], [-0.5, -0.3, 0.2])
    with pytest.raises(NoCandidate):
        pick(net, [(1, 1)], [(1, 0, Phase.ACTIVE), (1, 2, Phase.ACTIVE)])


def test_pick_random_branching_stays_in_shallowest_layer():
    net = Network((Layer([[1.0], [1.0]], [-0.5, -0.2]), Layer([[1.0, 1.0]], [0.0]),
                   Layer([[1.0]], [0.0])), 1, final_relu=False)
    for _ in range(5):
        layer, j, _ = pick(net, [(2, 0), (1, 1), (1, 0)], branching="random")
        assert layer == 1 and j in (0, 1)


def test_pick_requires_candidates():
    with pytest.raises(ValueError):
        pick(one_layer([1.0], [0.0]), [])


# --------------------------------------------------------------------------- verify

def test_verify_trivial_safe():
    v = verify(identity_net(), unit_query(2.0))
    assert v.status is VerdictStatus.SAFE and v.witness_input is None


def test_verify_trivial_unsafe():
    v = verify(identity_net(), unit_query(0.5))
    assert v.status is VerdictStatus.UNSAFE
    assert 0.5 - 1e-9 <= v.witness_input[0] <= 1.0 + 1e-9
    assert validate_witness(identity_net(), unit_query(0.5), v.witness_input)


def test_verify_inconsistent_shapes():
    from peregrinn.errors import ShapeError
    with pytest.raises(ShapeError):
        verify(identity_net(), VerificationQuery(Box([0, 0], [1, 1]), at_least(0.5)))


def test_config_validation():
    for bad in ({"timeout": 0}, {"volume_samples": 0}, {"seed": -1}, {"weight_ratio_cap": 1.0},
                {"branching": "widest"}):
        with pytest.raises(ValueError):
            VerifierConfig(**bad)


@pytest.mark.parametrize("seed", range(12))
def test_verify_agrees_with_oracle_small(seed):
    inst = random_instance(seed, max_layers=2, max_width=4)
    v = verify(inst.net, inst.query)
    ref = exhaustive_check(inst.net, inst.query)
    assert (v.status is VerdictStatus.UNSAFE) == ref.unsafe
    n_neurons = sum(inst.net.relu_widths)
    assert v.stats.lp_solves <= 2 ** n_neurons + 1


@pytest.mark.parametrize("seed", range(6))
def test_verify_polytope_input_with_map_and_coupling(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_network(rng, 2, [4, 3, 1], final_relu=False)
    tri = Polytope([[-1, 0], [0, -1], [1, 1]], [0.5, 0.5, 1.0])
    m = AffineMap(rng.normal(size=(2, 2)), rng.normal(size=2) * 0.1)
    cp = CoupledConstraints([rng.normal(size=2)], [[rng.normal()]], [float(rng.uniform(0, 1))])
    q = VerificationQuery(tri, Polytope([[-1.0]], [-float(rng.normal())]), m, cp)
    v = verify(net, q)
    ref = exhaustive_check(net, q)
    assert (v.status is VerdictStatus.UNSAFE) == ref.unsafe
    if v.status is VerdictStatus.UNSAFE:
        assert validate_witness(net, q, v.witness_input)


def hard_instance():
    return random_instance(0, fixed_widths=[30, 30, 30], dim=4)


def test_timeout_returns_unknown_quickly():
    inst = hard_instance()
    t0 = time.perf_counter()
    v = verify(inst.net, inst.query, VerifierConfig(timeout=0.5))
    elapsed = time.perf_counter() - t0
    assert v.status is VerdictStatus.UNKNOWN and v.reason is UnknownReason.TIMEOUT
    assert elapsed <= 2 * 0.5


def test_lp_budget_returns_resource():
    inst = hard_instance()
    v = verify(inst.net, inst.query, VerifierConfig(max_lp_solves=1))
    assert v.status is VerdictStatus.UNKNOWN and v.reason is UnknownReason.RESOURCE


def test_trace_records():
    inst = random_instance(3, max_layers=2, max_width=4)
    events = []
    v = verify(inst.net, inst.query, trace=events.append)
    assert events
    assert all({"event", "iteration", "depth", "stack"} <= set(e) for e in events)
    last = events[-1]["event"]
    assert last in ("safe", "unsafe", "backtrack")
    if v.status is VerdictStatus.UNSAFE:
        assert last == "unsafe"


def test_verify_deterministic():
    inst = random_instance(8)
    a, b = verify(inst.net, inst.query), verify(inst.net, inst.query)
    assert a.status is b.status and a.stats.as_dict() == b.stats.as_dict()
    if a.witness_input is not None:
        assert np.array_equal(a.witness_input, b.witness_input)


def test_verify_many_parallel_matches_sequential():
    insts = [random_instance(s, max_layers=2, max_width=4, dim=2) for s in range(4)]
    net = insts[0].net
    queries = [VerificationQuery(i.query.input_set, Polytope([[-1.0] + [0.0] * (net.output_dim - 1)],
                                                             [-t]))
               for i, t in zip(insts, (-1.0, 0.0, 0.5, 3.0))]
    seq = verify_many(net, queries)
    par = verify_many(net, queries, jobs=2)
    assert [v.status for v in seq] == [v.status for v in par]
    assert len(seq) == 4


def test_verdict_to_dict():
    v = verify(identity_net(), unit_query(0.5))
    d = v.to_dict(timestamps=False)
    assert d["verdict"] == "UNSAFE" and d["wall_time_s"] is None
    assert len(d["witness"]["input"]) == 1 and d["lp_solves"] >= 1
    assert ConditioningDecision(1, 0, Phase.ACTIVE).tag == "cond[1,0]"

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peregrinn import lp as L
from peregrinn.encoder import (ConditioningDecision, Origin, encode, extract_candidate_input,
                               indeterminate_neurons, layer_weights, slack_gaps)
from peregrinn.errors import InconsistentDecisionsError, ShapeError
from peregrinn.geometry import Box, Polytope
from peregrinn.nn import Layer, Network, Phase, forward, random_network
from peregrinn.query import CoupledConstraints, VerificationQuery


def tiny():
    return Network((Layer([[1.0]], [0.0]),), 1)


def threshold_query(dim, lo, hi, k, threshold):
    """Box input, violation set ``z_0 >= threshold`` over ``k`` outputs."""
    row = np.zeros((1, k))
    row[0, 0] = -1.0
    return VerificationQuery(Box(lo, hi), Polytope(row, [-threshold]))


def solve(prog):
    return L.solve(prog.lp)


def true_assignment(prog, net, x):
    """LP point holding the exact layer outputs of ``x``."""
    sol = np.zeros(prog.lp.n_vars)
    sol[prog.input_vars] = x
    y = np.asarray(x, float)
    for i, layer in enumerate(net.layers[:net.n_relu_layers], start=1):
        y = np.maximum(layer.weights @ y + layer.bias, 0.0)
        for j, v in enumerate(y):
            sol[prog.var_index[(i, j)]] = v
    return sol


def lp_feasible(lp, x, tol=1e-9):
    if np.any(x < lp.lower - tol) or np.any(x > lp.upper + tol):
        return False
    for c in lp.constraints:
        v = c.coeffs @ x
        if (c.sense == "<=" and v > c.rhs + tol) or (c.sense == ">=" and v < c.rhs - tol) \
                or (c.sense == "=" and abs(v - c.rhs) > tol):
            return False
    return True


# --------------------------------------------------------------------------- structure

def test_single_neuron_structure():
    q = VerificationQuery(Box([0.0], [1.0]), Polytope.universe(1))
    prog = encode(tiny(), q)
    assert prog.lp.n_vars == 2 and prog.var_index == {(1, 0): 1}
    tags = [c.tag for c in prog.lp.constraints]
    assert tags.count("relax[1,0]") == 1
    assert sum(t.startswith("input") for t in tags) == 2
    # slack >= 0 lives in the variable bound, the other relaxation row explicitly
    assert prog.lp.lower[1] == 0.0 and np.isneginf(prog.lp.lower[0])


def test_inactive_decision_rows_tagged():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    dec = ConditioningDecision(1, 0, Phase.INACTIVE)
    prog = encode(tiny(), q, [dec])
    rows = [c for c in prog.lp.constraints if c.tag == "cond[1,0]"]
    assert len(rows) == 2
    senses = sorted(c.sense for c in rows)
    assert senses == ["<=", "="]
    eq = next(c for c in rows if c.sense == "=")
    le = next(c for c in rows if c.sense == "<=")
    assert eq.coeffs.tolist() == [0.0, 1.0] and eq.rhs == 0.0  # y = 0
    assert le.coeffs.tolist() == [1.0, 0.0] and le.rhs == 0.0  # W x + b <= 0
    assert prog.conditioning_tags[dec] == ("cond[1,0]",)
    assert prog.search_tags() == ["cond[1,0]"]


def test_active_decision_row():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    prog = encode(tiny(), q, [ConditioningDecision(1, 0, Phase.ACTIVE)])
    rows = [c for c in prog.lp.constraints if c.tag == "cond[1,0]"]
    assert len(rows) == 1 and rows[0].sense == "=" and rows[0].coeffs.tolist() == [-1.0, 1.0]


def test_inferred_tag_prefix():
    d = ConditioningDecision(2, 3, Phase.ACTIVE, Origin.INFERRED)
    assert d.tag == "inf[2,3]"
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    prog = encode(tiny(), q, [ConditioningDecision(1, 0, Phase.ACTIVE, Origin.INFERRED)])
    assert prog.search_tags() == []


def test_inconsistent_decisions():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    with pytest.raises(InconsistentDecisionsError):
        encode(tiny(), q, [ConditioningDecision(1, 0, Phase.ACTIVE),
                           ConditioningDecision(1, 0, Phase.INACTIVE)])


def test_decision_on_missing_neuron():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    with pytest.raises(ShapeError):
        encode(tiny(), q, [ConditioningDecision(1, 5, Phase.ACTIVE)])
    with pytest.raises(ShapeError):
        encode(tiny(), q, [ConditioningDecision(2, 0, Phase.ACTIVE)])


def test_bad_weights():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    with pytest.raises(ValueError):
        encode(tiny(), q, weights=[1.0, 2.0])
    with pytest.raises(ValueError):
        encode(tiny(), q, weights=[0.0])


def test_linear_output_has_no_output_slacks(rng):
    net = random_network(rng, 2, [3, 2], final_relu=False)
    prog = encode(net, VerificationQuery(Box([-1, -1], [1, 1]), Polytope.universe(2)))
    assert prog.lp.n_vars == 2 + 3


def test_coupled_rows_present(rng):
    net = random_network(rng, 2, [3, 2], final_relu=False)
    cp = CoupledConstraints([[1.0, 0.0]], [[0.0, 1.0]], [0.5])
    q = VerificationQuery(Box([-1, -1], [1, 1]), Polytope.universe(2), coupled=cp)
    prog = encode(net, q)
    assert [c.tag for c in prog.lp.constraints].count("coupled[0]") == 1


# --------------------------------------------------------------------------- weights

def test_layer_weights_examples():
    assert layer_weights(1).tolist() == [1.0]
    assert layer_weights(3, 10.0).tolist() == [100.0, 10.0, 1.0]


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_layer_weights_capped(n):
    q = layer_weights(n, 1e9)
    assert q.max() / q.min() <= 1e6 * (1 + 1e-12)
    assert np.all(np.diff(q) < 0)  # earliest layer heaviest
    assert layer_weights(n).max() / layer_weights(n).min() == pytest.approx(1e6)


def test_layer_weights_errors():
    with pytest.raises(ValueError):
        layer_weights(0)
    with pytest.raises(ValueError):
        layer_weights(3, 1.0)


# --------------------------------------------------------------------------- solutions

def test_single_linear_region_all_tight():
    # every weight and bias positive on a positive box: all neurons always active
    net = Network((Layer([[1.0, 2.0], [0.5, 1.0]], [0.1, 0.2]),
                   Layer([[1.0, 1.0]], [0.3])), 2, final_relu=False)
    q = threshold_query(2, [0.0, 0.0], [1.0, 1.0], 1, 2.0)
    prog = encode(net, q)
    out = solve(prog)
    assert out.status is L.Status.OPTIMAL
    assert indeterminate_neurons(prog, out.solution) == []
    assert all(np.all(np.abs(g) < 1e-7) for g in slack_gaps(prog, out.solution))
    x = extract_candidate_input(prog, out.solution)
    z = forward(net, x)[0]
    assert z[0] >= 2.0 - 1e-6
    assert z == pytest.approx(prog.output(out.solution), abs=1e-7)


def test_candidate_is_input_block(rng):
    q = VerificationQuery(Box([0.2], [0.7]), Polytope.universe(1))
    prog = encode(tiny(), q)
    sol = np.array([0.4, 0.4])
    assert extract_candidate_input(prog, sol).tolist() == [0.4]


def test_indeterminate_hand_example():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    prog = encode(tiny(), q)
    assert indeterminate_neurons(prog, np.array([-1.0, 0.5])) == [(1, 0)]
    assert indeterminate_neurons(prog, np.array([-1.0, 0.0])) == []
    assert indeterminate_neurons(prog, np.array([0.3, 0.3])) == []


def test_indeterminate_excludes_decided():
    q = VerificationQuery(Box([-1.0], [1.0]), Polytope.universe(1))
    prog = encode(tiny(), q, [ConditioningDecision(1, 0, Phase.ACTIVE)])
    assert indeterminate_neurons(prog, np.array([-1.0, 0.5])) == []


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_indeterminates_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 2, [4, 3, 1], final_relu=False)
    prog = encode(net, threshold_query(2, [-1, -1], [1, 1], 1, float(rng.uniform(0, 2))))
    out = solve(prog)
    if out.status is not L.Status.OPTIMAL:
        return
    sol = out.solution
    expect = []
    for (i, j), var in prog.var_index.items():
        m, c = prog._pre_rows[i - 1]
        pre = m[j] @ sol + c[j]
        if sol[var] > max(0.0, pre) + 1e-6:
            expect.append((i, j))
    got = indeterminate_neurons(prog, sol)
    assert sorted(got) == sorted(expect)
    assert [i for i, _ in got] == sorted(i for i, _ in got)


# --------------------------------------------------------------------------- invariants

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_relaxation_soundness(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 2, [4, 3, 2], final_relu=bool(rng.random() < 0.5))
    x = rng.uniform(-1, 1, 2)
    z = forward(net, x)[0]
    # violation set built around the true output so it is always satisfied
    a = rng.normal(size=(2, 2))
    q = VerificationQuery(Box([-1, -1], [1, 1]), Polytope(a, a @ z + rng.uniform(0, 0.5, 2)))
    prog = encode(net, q)
    assert lp_feasible(prog.lp, true_assignment(prog, net, x))
    assert solve(prog).status is L.Status.OPTIMAL


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_full_decisions_are_exact(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 2, [3, 3, 1], final_relu=False)
    anchor = rng.uniform(-1, 1, 2)
    _, pattern, _ = forward(net, anchor)
    decs = [ConditioningDecision(i + 1, j, Phase(int(p[j])))
            for i, p in enumerate(pattern) for j in range(len(p))]
    prog = encode(net, VerificationQuery(Box([-1, -1], [1, 1]), Polytope.universe(1)), decs)
    out = solve(prog)
    assert out.status is L.Status.OPTIMAL  # the anchor is feasible
    assert all(np.all(np.abs(g) < 1e-6) for g in slack_gaps(prog, out.solution))
    x = extract_candidate_input(prog, out.solution)
    _, _, pre = forward(net, x)
    for i, p in enumerate(prog.preactivations(out.solution)):
        assert np.allclose(p, pre[i], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_objective_monotone_in_decisions(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 2, [4, 3, 1], final_relu=False)
    q = threshold_query(2, [-1, -1], [1, 1], 1, float(rng.uniform(-1, 1)))
    keys = [(i, j) for i in (1, 2) for j in range((4, 3)[i - 1])]
    rng.shuffle(keys)
    decs, prev = [], solve(encode(net, q))
    for i, j in keys[:4]:
        decs.append(ConditioningDecision(i, j, Phase(int(rng.integers(0, 2)))))
        cur = solve(encode(net, q, decs))
        if prev.status is L.Status.INFEASIBLE:
            assert cur.status is L.Status.INFEASIBLE
        elif cur.status is L.Status.OPTIMAL:
            assert cur.objective_value >= prev.objective_value - 1e-7 * max(1, abs(prev.objective_value))
        prev = cur


def test_depth_property_one_shallow_decision():
    """A single conditioned neuron in layer 1 never leaves a shallower indeterminate."""
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = random_network(rng, 2, [4, 4, 1], final_relu=False)
        q = threshold_query(2, [-1, -1], [1, 1], 1, float(rng.uniform(0, 2)))
        j = int(rng.integers(0, 4))
        dec = ConditioningDecision(1, j, Phase(int(rng.integers(0, 2))))
        prog = encode(net, q, [dec])
        out = solve(prog)
        if out.status is not L.Status.OPTIMAL:
            continue
        checked += 1
        ind = indeterminate_neurons(prog, out.solution)
        assert all(i >= 1 for i, _ in ind) and (1, j) not in ind
    assert checked >= 50


def test_depth_property_can_fail_for_deeper_decisions():
    # Conditioning a layer-2 neuron can force a previously tight layer-1 neuron
    # off both branches. The search repairs this by conditioning shallower
    # layers first; here we only pin the counterexample down.
    rng = np.random.default_rng(13)
    net = random_network(rng, 2, [4, 4, 1], final_relu=False)
    q = threshold_query(2, [-1, -1], [1, 1], 1, float(rng.uniform(0, 2)))
    base = encode(net, q)
    before = indeterminate_neurons(base, solve(base).solution)
    assert before and before[0][0] == 2
    prog = encode(net, q, [ConditioningDecision(2, 3, Phase.ACTIVE)])
    after = indeterminate_neurons(prog, solve(prog).solution)
    assert any(i == 1 for i, _ in after)

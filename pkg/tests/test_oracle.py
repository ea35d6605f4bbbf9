import numpy as np
import pytest

from peregrinn.geometry import Box, Polytope
from peregrinn.nn import AffineMap, Layer, Network, forward_batch
from peregrinn.oracle import exhaustive_check, random_instance
from peregrinn.query import CoupledConstraints, VerificationQuery
from peregrinn.search import validate_witness


def abs_net():
    # z = relu(x) + relu(-x) = |x|
    return Network((Layer([[1.0], [-1.0]], [0.0, 0.0]), Layer([[1.0, 1.0]], [0.0])), 1,
                   final_relu=False)


def test_identity_examples():
    net = Network((Layer([[1.0]], [0.0]),), 1)
    safe = VerificationQuery(Box([0.0], [1.0]), Polytope([[-1.0]], [-2.0]))
    unsafe = VerificationQuery(Box([0.0], [1.0]), Polytope([[-1.0]], [-0.5]))
    assert not exhaustive_check(net, safe).unsafe
    res = exhaustive_check(net, unsafe)
    assert res.unsafe and validate_witness(net, unsafe, res.witness)


def test_abs_network():
    box = Box([-1.0], [1.0])
    assert exhaustive_check(abs_net(), VerificationQuery(box, Polytope([[-1.0]], [-0.9]))).unsafe
    assert not exhaustive_check(abs_net(), VerificationQuery(box, Polytope([[1.0]], [-0.1]))).unsafe
    # |x| >= 0.5 on [-0.4, 0.4] is impossible even though each branch alone is linear
    small = Box([-0.4], [0.4])
    assert not exhaustive_check(abs_net(), VerificationQuery(small, Polytope([[-1.0]], [-0.5]))).unsafe


def test_empty_input_region():
    empty = Polytope([[1.0], [-1.0]], [0.0, -1.0])  # x <= 0 and x >= 1
    res = exhaustive_check(abs_net(), VerificationQuery(empty, Polytope.universe(1)))
    assert not res.unsafe and res.lp_calls == 1


def test_input_map_and_coupling():
    q = VerificationQuery(Box([0.0], [1.0]), Polytope([[-1.0]], [-1.5]),
                          input_map=AffineMap([[2.0]], [-0.5]))
    res = exhaustive_check(abs_net(), q)  # |2x - 0.5| reaches 1.5 at x = 1
    assert res.unsafe and validate_witness(abs_net(), q, res.witness)
    cp = CoupledConstraints([[1.0]], [[0.0]], [0.9])  # forbid x > 0.9
    assert not exhaustive_check(abs_net(), VerificationQuery(
        Box([0.0], [1.0]), Polytope([[-1.0]], [-1.5]), AffineMap([[2.0]], [-0.5]), cp)).unsafe


@pytest.mark.parametrize("seed", range(30))
def test_random_instances_witness_and_sampling(seed):
    inst = random_instance(seed)
    res = exhaustive_check(inst.net, inst.query)
    if res.unsafe:
        assert validate_witness(inst.net, inst.query, res.witness)
    else:
        box = inst.query.input_box()
        pts = np.random.default_rng(seed).uniform(box.lower, box.upper, size=(5000, box.dim))
        outs = forward_batch(inst.net, pts)
        v = inst.query.violation_set
        assert not np.any(np.all(outs @ v.a_matrix.T <= v.b_vector, axis=1))


def test_random_instance_shape_and_determinism():
    a, b = random_instance(4), random_instance(4)
    assert a.net.to_dict() == b.net.to_dict()
    assert a.query.to_dict() == b.query.to_dict()
    for seed in range(40):
        inst = random_instance(seed)
        assert 1 <= inst.net.n_layers <= 3 and max(inst.net.relu_widths or (1,)) <= 6
        assert 1 <= inst.query.ambient_dim <= 3 and 1 <= inst.query.violation_set.n_rows <= 3


def test_random_instances_mix_verdicts():
    flags = [exhaustive_check(i.net, i.query).unsafe for i in map(random_instance, range(40))]
    assert 5 <= sum(flags) <= 35

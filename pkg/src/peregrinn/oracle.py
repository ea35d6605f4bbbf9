"""Exhaustive activation-pattern oracle and random benchmark instances.

The oracle shares nothing with the search path except the network and query
types: it enumerates activation patterns depth-first, neuron by neuron, and
checks each partial region with HiGHS (via scipy). Prefixes whose region is
empty are pruned, which never discards a non-empty full pattern.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geometry import Box, Polytope
from .nn import Network, forward_batch, random_network
from .query import VerificationQuery

FEAS_TOL = 1e-9


@dataclass
class OracleResult:
    unsafe: bool
    witness: np.ndarray | None
    lp_calls: int


def _feasible(a_rows, b_rows, dim):
    if not a_rows:
        return np.zeros(dim)
    a = np.vstack(a_rows)
    b = np.concatenate(b_rows)
    res = linprog(np.zeros(dim), A_ub=a, b_ub=b, bounds=[(None, None)] * dim, method="highs",
                  options={"primal_feasibility_tolerance": FEAS_TOL})
    return res.x if res.status == 0 else None


def exhaustive_check(net: Network, query: VerificationQuery) -> OracleResult:
    """Is there an input satisfying the query? Decided by pattern enumeration."""
    d = query.ambient_dim
    poly = query.input_polytope()
    if query.input_map is not None:
        mat, off = query.input_map.matrix, query.input_map.offset
    else:
        mat, off = np.eye(d), np.zeros(d)
    layers = net.layers
    n_relu = net.n_relu_layers
    calls = 0

    def tail(m, c, a_rows, b_rows):
        # m, c: affine map from x to the network output
        nonlocal calls
        a_rows = list(a_rows)
        b_rows = list(b_rows)
        v = query.violation_set
        if v.n_rows:
            a_rows.append(v.a_matrix @ m)
            b_rows.append(v.b_vector - v.a_matrix @ c)
        if query.coupled is not None:
            cp = query.coupled
            a_rows.append(cp.gx + cp.gz @ m)
            b_rows.append(cp.g - cp.gz @ c)
        calls += 1
        return _feasible(a_rows, b_rows, d)

    def descend(layer_idx, pre_m, pre_c, post_m, post_c, neuron, a_rows, b_rows):
        # pre_m/pre_c: pre-activation of layer layer_idx (1-based) as affine in x
        nonlocal calls
        if neuron == pre_m.shape[0]:
            m, c = post_m, post_c
            nxt = layer_idx + 1
            if nxt > len(layers):
                return tail(m, c, a_rows, b_rows)
            w, b = layers[nxt - 1].weights, layers[nxt - 1].bias
            nm, nc = w @ m, w @ c + b
            if nxt > n_relu:
                return tail(nm, nc, a_rows, b_rows)
            return descend(nxt, nm, nc, np.zeros_like(nm), np.zeros_like(nc), 0, a_rows, b_rows)
        row, const = pre_m[neuron], pre_c[neuron]
        for active in (True, False):
            if active:
                ra, rb = -row[None, :], np.array([const])
            else:
                ra, rb = row[None, :], np.array([-const])
            calls += 1
            if _feasible(a_rows + [ra], b_rows + [rb], d) is None:
                continue
            pm, pc = post_m.copy(), post_c.copy()
            if active:
                pm[neuron], pc[neuron] = row, const
            found = descend(layer_idx, pre_m, pre_c, pm, pc, neuron + 1,
                            a_rows + [ra], b_rows + [rb])
            if found is not None:
                return found
        return None

    a0, b0 = [poly.a_matrix], [poly.b_vector]
    calls += 1
    if _feasible(a0, b0, d) is None:
        return OracleResult(False, None, calls)
    w1, b1 = layers[0].weights, layers[0].bias
    m1, c1 = w1 @ mat, w1 @ off + b1
    if n_relu == 0:
        x = tail(m1, c1, a0, b0)
    else:
        x = descend(1, m1, c1, np.zeros_like(m1), np.zeros_like(c1), 0, a0, b0)
    return OracleResult(x is not None, x, calls)


# --------------------------------------------------------------------------- instances

@dataclass
class Instance:
    net: Network
    query: VerificationQuery
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "network": self.net.to_dict(), "property": self.query.to_dict()}


def random_instance(seed: int, max_layers: int = 3, max_width: int = 6, max_dim: int = 3,
                    min_layers: int = 1, fixed_widths=None, dim: int | None = None) -> Instance:
    """Random net, random input box and a 1-3 row violation polytope.

    About half the violation sets are built around a sampled output (so the
    instance is UNSAFE); the rest are cut below every sampled output (usually
    SAFE, occasionally UNSAFE when sampling missed the extreme region).
    """
    rng = np.random.default_rng(seed)
    d = dim if dim is not None else int(rng.integers(1, max_dim + 1))
    if fixed_widths is not None:
        widths = list(fixed_widths)
    else:
        n_layers = int(rng.integers(min_layers, max_layers + 1))
        widths = [int(rng.integers(1, max_width + 1)) for _ in range(n_layers)]
    final_relu = bool(rng.random() < 0.6)
    net = random_network(rng, d, widths, final_relu=final_relu)

    center = rng.uniform(-1, 1, d)
    half = rng.uniform(0.2, 1.0, d)
    box = Box(center - half, center + half)
    pts = rng.uniform(box.lower, box.upper, size=(400, d))
    outs = forward_batch(net, pts)
    k = net.output_dim
    n_rows = int(rng.integers(1, 4))
    a = rng.normal(size=(n_rows, k))
    vals = outs @ a.T
    spread = np.maximum(vals.max(axis=0) - vals.min(axis=0), 1e-3)
    if rng.random() < 0.5:
        anchor = vals[int(rng.integers(len(vals)))]
        b = anchor + rng.uniform(0.0, 0.3, n_rows) * spread
    else:
        b = vals.max(axis=0) + rng.uniform(0.05, 0.5, n_rows) * spread
        r = int(rng.integers(n_rows))
        b[r] = vals[:, r].min() - rng.uniform(0.02, 0.3) * spread[r]
    query = VerificationQuery(box, Polytope(a, b))
    return Instance(net, query, seed)

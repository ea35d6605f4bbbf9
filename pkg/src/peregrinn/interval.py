"""Symbolic interval analysis over an input box with phase inference.

Affine expressions over the ``d`` input variables are stored as rows of length
``d + 1``: coefficients followed by the constant term.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from .errors import DomainError, ShapeError
from .geometry import Box
from .nn import UNFIXED, Network, Phase


class Provenance(IntEnum):
    FREE = 0
    DECIDED = 1
    INFERRED = 2


class BranchInfeasible(Exception):
    """A decided phase contradicts the bounds: the branch holds no input."""

    def __init__(self, layer: int, neuron: int):
        super().__init__(f"decided phase of neuron ({layer}, {neuron}) is impossible")
        self.layer = layer
        self.neuron = neuron


@dataclass(frozen=True, eq=False)
class PhaseMap:
    phases: tuple      # int8 arrays: 1 active, 0 inactive, -1 free
    provenance: tuple  # int8 arrays of Provenance

    @classmethod
    def free(cls, net: Network) -> "PhaseMap":
        return cls(net.empty_pattern(),
                   tuple(np.zeros(w, dtype=np.int8) for w in net.relu_widths))

    @classmethod
    def from_decisions(cls, net: Network, decisions: Iterable) -> "PhaseMap":
        """``decisions`` yields ``(layer, neuron, phase)`` with 1-based layers."""
        pm = cls.free(net)
        for layer, neuron, phase in decisions:
            pm.phases[layer - 1][neuron] = int(phase)
            pm.provenance[layer - 1][neuron] = Provenance.DECIDED
        return pm

    def copy(self) -> "PhaseMap":
        return PhaseMap(tuple(p.copy() for p in self.phases),
                        tuple(p.copy() for p in self.provenance))

    def entries(self, provenance: Provenance):
        for i, (ph, pv) in enumerate(zip(self.phases, self.provenance), start=1):
            for j in np.flatnonzero(pv == provenance):
                yield (i, int(j), Phase(int(ph[j])))

    def n_fixed(self) -> int:
        return int(sum(np.count_nonzero(p != UNFIXED) for p in self.phases))


@dataclass(frozen=True, eq=False)
class SymbolicBounds:
    """Per layer (every layer, including a linear output layer): symbolic and
    concrete bounds on the pre-activation."""

    lower_exprs: tuple
    upper_exprs: tuple
    concrete_lo: tuple
    concrete_hi: tuple
    box: Box

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"layer": i, "lower": lo.tolist(), "upper": hi.tolist()}
                for i, (lo, hi) in enumerate(zip(self.concrete_lo, self.concrete_hi), start=1)
            ]
        }


def _concretize(exprs: np.ndarray, box: Box):
    coef, const = exprs[:, :-1], exprs[:, -1]
    pos, neg = np.maximum(coef, 0.0), np.minimum(coef, 0.0)
    hi = pos @ box.upper + neg @ box.lower + const
    lo = pos @ box.lower + neg @ box.upper + const
    return lo, hi


def relax_relu(lower_expr, upper_expr, lo: float, hi: float):
    """Chord upper bound ``hi/(hi-lo) * (upper - lo)`` and constant-zero lower bound."""
    if not (lo < 0.0 < hi):
        raise DomainError(f"relaxation needs lo < 0 < hi, got [{lo}, {hi}]")
    lower_expr = np.asarray(lower_expr, dtype=float)
    upper_expr = np.asarray(upper_expr, dtype=float)
    slope = hi / (hi - lo)
    new_upper = slope * upper_expr
    new_upper[..., -1] -= slope * lo
    return np.zeros_like(lower_expr), new_upper


def symbolic_analysis(net: Network, input_box: Box, fixed: PhaseMap | None = None) -> SymbolicBounds:
    d = net.input_dim
    if input_box.dim != d:
        raise ShapeError(f"box has dimension {input_box.dim}, network expects {d}")
    if fixed is None:
        fixed = PhaseMap.free(net)
    if tuple(len(p) for p in fixed.phases) != net.relu_widths:
        raise ShapeError("phase map does not match the network layer widths")

    lower = np.hstack([np.eye(d), np.zeros((d, 1))])
    upper = lower.copy()
    lows, ups, clo, chi = [], [], [], []
    for i, layer in enumerate(net.layers, start=1):
        w_pos = np.maximum(layer.weights, 0.0)
        w_neg = np.minimum(layer.weights, 0.0)
        pre_up = w_pos @ upper + w_neg @ lower
        pre_lo = w_pos @ lower + w_neg @ upper
        pre_up[:, -1] += layer.bias
        pre_lo[:, -1] += layer.bias
        lo, _ = _concretize(pre_lo, input_box)
        _, hi = _concretize(pre_up, input_box)
        lo = np.minimum(lo, hi)
        lows.append(pre_lo)
        ups.append(pre_up)
        clo.append(lo)
        chi.append(hi)
        if i > net.n_relu_layers:
            lower, upper = pre_lo, pre_up
            continue
        phases = fixed.phases[i - 1]
        active = (phases == Phase.ACTIVE) | ((phases == UNFIXED) & (lo >= 0))
        inactive = (phases == Phase.INACTIVE) | ((phases == UNFIXED) & (hi <= 0) & ~active)
        straddle = ~active & ~inactive
        new_lo = np.where(active[:, None], pre_lo, 0.0)
        new_up = np.where(active[:, None], pre_up, 0.0)
        for j in np.flatnonzero(straddle):
            new_lo[j], new_up[j] = relax_relu(pre_lo[j], pre_up[j], lo[j], hi[j])
        lower, upper = new_lo, new_up
    return SymbolicBounds(tuple(lows), tuple(ups), tuple(clo), tuple(chi), input_box)


def infer_phases(bounds: SymbolicBounds, fixed: PhaseMap) -> PhaseMap:
    """Add INFERRED phases for free neurons whose sign is settled by the bounds.

    Raises ``BranchInfeasible`` when a phase already fixed in ``fixed``
    contradicts the bounds.
    """
    out = fixed.copy()
    for i, (ph, pv) in enumerate(zip(out.phases, out.provenance), start=1):
        lo, hi = bounds.concrete_lo[i - 1], bounds.concrete_hi[i - 1]
        fixed_in = pv != Provenance.FREE
        bad = fixed_in & (((ph == Phase.ACTIVE) & (hi < 0)) | ((ph == Phase.INACTIVE) & (lo > 0)))
        if np.any(bad):
            raise BranchInfeasible(i, int(np.flatnonzero(bad)[0]))
        free = ph == UNFIXED
        off = free & (hi <= 0)
        on = free & (lo >= 0) & ~off
        ph[on] = Phase.ACTIVE
        ph[off] = Phase.INACTIVE
        pv[on | off] = Provenance.INFERRED
    return out

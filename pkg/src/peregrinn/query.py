"""Verification queries: is there an x in the input set whose network output
lands in the violation set while the coupled constraints hold?"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ShapeError
from .geometry import Box, Polytope, Region, as_polytope
from .nn import AffineMap, Network


@dataclass(frozen=True, eq=False)
class CoupledConstraints:
    """Rows ``gx @ x + gz @ z <= g`` tying the query input x to the network output z."""

    gx: np.ndarray
    gz: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        gx = np.atleast_2d(np.asarray(self.gx, dtype=float))
        gz = np.atleast_2d(np.asarray(self.gz, dtype=float))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if not (gx.shape[0] == gz.shape[0] == g.shape[0]):
            raise ShapeError("coupled constraint blocks have different row counts")
        object.__setattr__(self, "gx", gx)
        object.__setattr__(self, "gz", gz)
        object.__setattr__(self, "g", g)

    @property
    def n_rows(self) -> int:
        return self.g.shape[0]

    def holds(self, x, z, tol: float = 1e-6) -> bool:
        return bool(np.all(self.gx @ x + self.gz @ z <= self.g + tol))


@dataclass(frozen=True, eq=False)
class VerificationQuery:
    input_set: Region
    violation_set: Polytope
    input_map: AffineMap | None = None
    coupled: CoupledConstraints | None = None

    @property
    def ambient_dim(self) -> int:
        return self.input_set.dim

    def input_polytope(self) -> Polytope:
        return as_polytope(self.input_set)

    def input_box(self) -> Box:
        return self.input_set.bounding_box()

    def validate_for(self, net: Network) -> None:
        d = self.ambient_dim
        k0 = net.input_dim
        if self.input_map is None:
            if d != k0:
                raise ShapeError(f"input set has dimension {d}, network expects {k0}")
        elif self.input_map.in_dim != d or self.input_map.out_dim != k0:
            raise ShapeError("input map dimensions do not connect input set and network")
        if self.violation_set.dim != net.output_dim:
            raise ShapeError(
                f"violation set has dimension {self.violation_set.dim}, network outputs {net.output_dim}")
        if self.coupled is not None:
            if self.coupled.gx.shape[1] != d or self.coupled.gz.shape[1] != net.output_dim:
                raise ShapeError("coupled constraint blocks have wrong widths")

    def to_dict(self) -> dict:
        out = {"type": "raw", "input_set": self.input_set.to_dict(),
               "violation_set": self.violation_set.to_dict()}
        if self.input_map is not None:
            out["input_map"] = {"matrix": self.input_map.matrix.tolist(),
                                "offset": self.input_map.offset.tolist()}
        if self.coupled is not None:
            out["coupled"] = [{"gx": gx.tolist(), "gz": gz.tolist(), "g": float(g)}
                              for gx, gz, g in zip(self.coupled.gx, self.coupled.gz, self.coupled.g)]
        return out


def region_from_dict(data) -> Region:
    if not isinstance(data, dict):
        raise ParseError("region must be a JSON object")
    if "lower" in data and "upper" in data:
        return Box(data["lower"], data["upper"])
    if "A" in data and "b" in data:
        a = np.asarray(data["A"], dtype=float)
        b = np.asarray(data["b"], dtype=float)
        if a.size == 0 and "dim" in data:
            a = np.zeros((0, int(data["dim"])))
        return Polytope(a, b)
    raise ParseError("region needs either lower/upper or A/b")


def polytope_from_dict(data, dim: int | None = None) -> Polytope:
    if data is None:
        if dim is None:
            raise ParseError("cannot build the full space without a dimension")
        return Polytope.universe(dim)
    region = region_from_dict(data)
    poly = region.to_polytope() if isinstance(region, Box) else region
    if poly.n_rows == 0 and dim is not None and poly.dim != dim:
        poly = Polytope.universe(dim)
    return poly


def query_from_dict(data: dict, net: Network) -> VerificationQuery:
    try:
        input_set = region_from_dict(data["input_set"])
    except KeyError as exc:
        raise ParseError("raw property needs 'input_set'") from exc
    input_map = None
    if data.get("input_map") is not None:
        m = data["input_map"]
        input_map = AffineMap(m["matrix"], m["offset"])
    violation = polytope_from_dict(data.get("violation_set"), net.output_dim)
    coupled = None
    rows = data.get("coupled") or []
    if rows:
        coupled = CoupledConstraints([r["gx"] for r in rows], [r["gz"] for r in rows],
                                     [r["g"] for r in rows])
    q = VerificationQuery(input_set, violation, input_map, coupled)
    q.validate_for(net)
    return q

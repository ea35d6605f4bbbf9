"""Feed-forward ReLU networks: representation, loading, evaluation and
fixed-phase folding.

Layer indices follow the convention that layer 1 is the first affine+ReLU
transformation and layer 0 is the network input. Neuron indices inside a layer
are zero-based.

An activation pattern is a tuple with one ``int8`` array per ReLU layer whose
entries are ``Phase.ACTIVE`` (1), ``Phase.INACTIVE`` (0) or ``UNFIXED`` (-1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import IO, Sequence, Union

import numpy as np

from .errors import NonFiniteError, ParseError, PhaseError, ShapeError


class Phase(IntEnum):
    INACTIVE = 0
    ACTIVE = 1


UNFIXED = -1

ActivationPattern = tuple  # tuple[np.ndarray, ...], one int8 array per ReLU layer


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _as_vector(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _as_matrix(self.weights, "weights")
        b = _as_vector(self.bias, "bias")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(
                f"weights have {w.shape[0]} rows but bias has length {b.shape[0]}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``x -> matrix @ x + offset``."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.matrix, "matrix")
        o = _as_vector(self.offset, "offset")
        if m.shape[0] != o.shape[0]:
            raise ShapeError(
                f"matrix has {m.shape[0]} rows but offset has length {o.shape[0]}")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", o)

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input of dimension {self.in_dim}, got {x.shape[-1]}")
        return x @ self.matrix.T + self.offset


def compose(outer: AffineMap, inner: AffineMap) -> AffineMap:
    """Return the map ``x -> outer(inner(x))``."""
    if outer.in_dim != inner.out_dim:
        raise ShapeError(
            f"cannot compose: outer expects {outer.in_dim} inputs, inner yields {inner.out_dim}")
    return AffineMap(outer.matrix @ inner.matrix, outer.matrix @ inner.offset + outer.offset)


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_dim: int
    final_relu: bool = True

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 1:
            raise ShapeError("a network needs at least one layer")
        prev = int(self.input_dim)
        for i, layer in enumerate(layers, start=1):
            if layer.in_dim != prev:
                raise ShapeError(
                    f"layer {i} expects {layer.in_dim} inputs but receives {prev}")
            prev = layer.out_dim
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", int(self.input_dim))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_relu_layers(self) -> int:
        return self.n_layers if self.final_relu else self.n_layers - 1

    @property
    def relu_widths(self) -> tuple:
        return tuple(layer.out_dim for layer in self.layers[: self.n_relu_layers])

    @property
    def neuron_count(self) -> int:
        return sum(self.relu_widths)

    def neurons(self):
        """Iterate over ``(layer, neuron)`` for every ReLU neuron, shallow first."""
        for i, width in enumerate(self.relu_widths, start=1):
            for j in range(width):
                yield (i, j)

    def empty_pattern(self) -> ActivationPattern:
        return tuple(np.full(w, UNFIXED, dtype=np.int8) for w in self.relu_widths)

    def with_input_map(self, input_map: AffineMap | None) -> "Network":
        """Fold an affine pre-map into the first layer."""
        if input_map is None:
            return self
        first = self.layers[0]
        if input_map.out_dim != first.in_dim:
            raise ShapeError(
                f"input map yields {input_map.out_dim} values, network expects {first.in_dim}")
        folded = Layer(first.weights @ input_map.matrix,
                       first.weights @ input_map.offset + first.bias)
        return Network((folded,) + self.layers[1:], input_map.in_dim, self.final_relu)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "final_relu": self.final_relu,
            "layers": [{"weights": l.weights.tolist(), "bias": l.bias.tolist()}
                       for l in self.layers],
        }


def forward(net: Network, x):
    """Evaluate the network.

    Returns ``(output, pattern, preacts)`` where ``preacts[i-1]`` is the
    pre-activation of layer ``i`` and ``pattern`` marks a neuron active iff its
    pre-activation is strictly positive.
    """
    y = np.asarray(x, dtype=float)
    if y.shape != (net.input_dim,):
        raise ShapeError(f"expected input of shape ({net.input_dim},), got {y.shape}")
    preacts = []
    pattern = []
    for i, layer in enumerate(net.layers, start=1):
        z = layer.weights @ y + layer.bias
        preacts.append(z)
        if i <= net.n_relu_layers:
            pattern.append((z > 0).astype(np.int8))
            y = np.maximum(z, 0.0)
        else:
            y = z
    return y, tuple(pattern), preacts


def forward_batch(net: Network, xs) -> np.ndarray:
    """Vectorised forward pass over the rows of ``xs``."""
    y = np.asarray(xs, dtype=float)
    for i, layer in enumerate(net.layers, start=1):
        y = y @ layer.weights.T + layer.bias
        if i <= net.n_relu_layers:
            y = np.maximum(y, 0.0)
    return y


def batch_patterns(net: Network, xs) -> list:
    """Activation patterns of every row of ``xs``: one bool array (N, k_i) per ReLU layer."""
    y = np.asarray(xs, dtype=float)
    out = []
    for layer in net.layers[: net.n_relu_layers]:
        z = y @ layer.weights.T + layer.bias
        out.append(z > 0)
        y = np.maximum(z, 0.0)
    return out


def fold_affine(net: Network, pattern: Sequence[np.ndarray], through_layer: int) -> AffineMap:
    """Affine map from the network input to the output of ``through_layer``.

    Every neuron in layers ``1..through_layer`` must be fixed in ``pattern``;
    inactive rows are zeroed. A non-ReLU final layer is passed through as is.
    """
    if not 0 <= through_layer <= net.n_layers:
        raise ShapeError(f"through_layer must lie in [0, {net.n_layers}]")
    matrix = np.eye(net.input_dim)
    offset = np.zeros(net.input_dim)
    for i in range(1, through_layer + 1):
        layer = net.layers[i - 1]
        matrix = layer.weights @ matrix
        offset = layer.weights @ offset + layer.bias
        if i <= net.n_relu_layers:
            phases = np.asarray(pattern[i - 1])
            if phases.shape != (layer.out_dim,):
                raise ShapeError(f"pattern for layer {i} has wrong shape {phases.shape}")
            if np.any(phases == UNFIXED):
                raise PhaseError(f"layer {i} has unfixed neurons")
            mask = (phases == Phase.ACTIVE).astype(float)
            matrix = matrix * mask[:, None]
            offset = offset * mask
    return AffineMap(matrix, offset)


# --------------------------------------------------------------------------- loading

def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict) or "layers" not in data:
        raise ParseError("network JSON must be an object with a 'layers' list")
    raw_layers = data["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ShapeError("network needs a non-empty 'layers' list")
    layers = []
    for i, raw in enumerate(raw_layers, start=1):
        try:
            w, b = raw["weights"], raw["bias"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"layer {i} lacks 'weights' or 'bias'") from exc
        try:
            w_arr = np.asarray(w, dtype=float)
            b_arr = np.asarray(b, dtype=float)
        except (ValueError, TypeError) as exc:
            raise ShapeError(f"layer {i} is ragged or non-numeric: {exc}") from exc
        layers.append(Layer(w_arr, b_arr))
    input_dim = data.get("input_dim", layers[0].in_dim)
    final_relu = data.get("final_relu", True)
    if not isinstance(final_relu, bool):
        raise ParseError("'final_relu' must be a boolean")
    return Network(tuple(layers), int(input_dim), final_relu)


def _parse_nnet(text: str) -> Network:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("//")]

    def numbers(line):
        try:
            return [float(tok) for tok in line.split(",") if tok.strip()]
        except ValueError as exc:
            raise ParseError(f"bad numeric line in NNet: {line!r}") from exc

    try:
        header = numbers(lines[0])
        n_layers, in_size = int(header[0]), int(header[1])
        sizes = [int(v) for v in numbers(lines[1])]
        if len(sizes) != n_layers + 1 or sizes[0] != in_size:
            raise ShapeError("NNet layer-size line disagrees with header")
        # lines[2] is the legacy 'symmetric' flag
        in_min = np.array(numbers(lines[3]))
        in_max = np.array(numbers(lines[4]))
        means = np.array(numbers(lines[5]))
        ranges = np.array(numbers(lines[6]))
        pos = 7
        layers = []
        for i in range(n_layers):
            rows, cols = sizes[i + 1], sizes[i]
            w = np.array([numbers(lines[pos + r])[:cols] for r in range(rows)])
            pos += rows
            b = np.array([numbers(lines[pos + r])[0] for r in range(rows)])
            pos += rows
            if w.shape != (rows, cols):
                raise ShapeError(f"NNet layer {i + 1} weights have shape {w.shape}")
            layers.append(Layer(w, b))
    except IndexError as exc:
        raise ParseError("truncated NNet file") from exc
    if len(means) < in_size or len(ranges) < in_size:
        raise ParseError("NNet normalisation lines are too short")
    del in_min, in_max  # domain clipping is left to the query's input set
    scale = 1.0 / ranges[:in_size]
    pre_map = AffineMap(np.diag(scale), -means[:in_size] * scale)
    net = Network(tuple(layers), in_size, final_relu=False)
    return net.with_input_map(pre_map)


def load_network(source: Union[str, bytes, IO], format: str = "json") -> Network:
    """Load a network from a byte/text stream or an in-memory string.

    ``format`` is ``"json"`` or ``"nnet"``. NNet input normalisation is folded
    into the first layer; NNet output layers are linear (``final_relu=False``).
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    fmt = format.lower()
    if fmt == "json":
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
        return network_from_dict(data)
    if fmt == "nnet":
        return _parse_nnet(source)
    raise ParseError(f"unknown network format {format!r}")


def load_network_file(path) -> Network:
    fmt = "nnet" if str(path).lower().endswith(".nnet") else "json"
    with open(path, "rb") as fh:
        return load_network(fh, fmt)


def random_network(rng: np.random.Generator, input_dim: int, widths: Sequence[int],
                   final_relu: bool = True, bias_scale: float = 0.5) -> Network:
    """Gaussian weights scaled by fan-in; used by tests and benchmark suites."""
    layers = []
    prev = input_dim
    for w in widths:
        layers.append(Layer(rng.normal(size=(w, prev)) / np.sqrt(prev),
                            bias_scale * rng.normal(size=w)))
        prev = w
    return Network(tuple(layers), input_dim, final_relu)

"""Multi-layer perceptrons over a flat parameter vector.

Everything here is a pure function of its inputs. Parameters live in a single
float64 array; a layout describes how that array splits into per-layer weight
matrices and bias vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu",)
LOSS_KINDS = ("cross_entropy", "mse_onehot")


@dataclass(frozen=True)
class Group:
    """One contiguous slice of the parameter vector."""

    group_id: int
    kind: str  # "weight" or "bias"
    layer: int
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layout(self) -> tuple[Group, ...]:
        groups = []
        offset = 0
        w = self.widths
        for layer in range(self.n_layers):
            fan_in, fan_out = w[layer], w[layer + 1]
            groups.append(Group(len(groups), "weight", layer, offset, (fan_in, fan_out)))
            offset += fan_in * fan_out
            groups.append(Group(len(groups), "bias", layer, offset, (fan_out,)))
            offset += fan_out
        return tuple(groups)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "loss_kind": self.loss_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "relu"),
            loss_kind=d.get("loss_kind", "cross_entropy"),
        )


def _check_layout(layout: Sequence[Group], n: int) -> None:
    pos = 0
    for g in sorted(layout, key=lambda g: g.offset):
        if g.offset != pos:
            raise ValueError(f"layout gap or overlap at offset {pos}")
        pos = g.stop
    if pos != n:
        raise ValueError(f"layout covers {pos} entries, vector has {n}")


@dataclass(frozen=True)
class ParameterVector:
    """Immutable flat float64 vector plus the layout that gives it structure."""

    values: np.ndarray
    layout: tuple[Group, ...] = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", tuple(self.layout))
        _check_layout(self.layout, v.size)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def group(self, group_id: int) -> np.ndarray:
        g = self.layout[group_id]
        return self.values[g.offset:g.stop].reshape(g.shape)


def init_params(spec: NetworkSpec, seed: int) -> ParameterVector:
    """Fan-in scaled uniform weights in (-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    values = np.zeros(spec.n_params)
    for g in layout:
        if g.kind == "weight":
            bound = 1.0 / math.sqrt(g.shape[0])
            values[g.offset:g.stop] = rng.uniform(-bound, bound, size=g.size)
    return ParameterVector(values, layout)


def unpack(spec: NetworkSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer into a raw flat vector."""
    layers = []
    w = spec.widths
    offset = 0
    for layer in range(spec.n_layers):
        fan_in, fan_out = w[layer], w[layer + 1]
        W = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=np.float64)


def _forward_raw(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, keep: bool = False):
    layers = unpack(spec, theta)
    h = X
    cache = [h]
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
        else:
            h = z
        if keep:
            cache.append(h)
    return (h, cache) if keep else h


def forward(spec: NetworkSpec, params, inputs: np.ndarray) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of width {spec.input_dim}, got shape {X.shape}")
    theta = _values(params)
    if theta.size != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {theta.size}")
    return _forward_raw(spec, theta, X)


def per_sample_loss(loss_kind: str, outputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    rows = np.arange(labels.size)
    if loss_kind == "cross_entropy":
        m = outputs.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(outputs - m).sum(axis=1))
        return lse - outputs[rows, labels]
    target = np.zeros_like(outputs)
    target[rows, labels] = 1.0
    return ((outputs - target) ** 2).mean(axis=1)


def _check_data(spec: NetworkSpec, X: np.ndarray, y: np.ndarray) -> None:
    if y.size == 0:
        raise ValueError("empty dataset")
    if X.shape[0] != y.size:
        raise ValueError("features and labels disagree on sample count")
    if y.min() < 0 or y.max() >= spec.output_dim:
        raise ValueError("labels out of range for output_dim")


def loss_raw(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    out = _forward_raw(spec, theta, X)
    with np.errstate(over="ignore", invalid="ignore"):
        losses = per_sample_loss(spec.loss_kind, out, y)
    # fsum is exactly rounded, so the mean does not depend on reduction order
    return math.fsum(losses) / y.size


def loss_mean(spec: NetworkSpec, params, dataset) -> float:
    X, y = dataset.features, dataset.labels
    _check_data(spec, X, y)
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of width {spec.input_dim}, got {X.shape[1]}")
    return loss_raw(spec, _values(params), X, y)


def grad_raw(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the flat vector."""
    out, cache = _forward_raw(spec, theta, X, keep=True)
    N = y.size
    rows = np.arange(N)
    if spec.loss_kind == "cross_entropy":
        m = out.max(axis=1, keepdims=True)
        e = np.exp(out - m)
        s = e.sum(axis=1, keepdims=True)
        losses = (m[:, 0] + np.log(s[:, 0])) - out[rows, y]
        delta = e / s
        delta[rows, y] -= 1.0
        delta /= N
    else:
        target = np.zeros_like(out)
        target[rows, y] = 1.0
        diff = out - target
        losses = (diff ** 2).mean(axis=1)
        delta = diff * (2.0 / (N * spec.output_dim))
    loss = math.fsum(losses) / N

    g = np.empty_like(theta)
    gl = unpack(spec, g)
    layers = unpack(spec, theta)
    for i in range(len(layers) - 1, -1, -1):
        h_in = cache[i]
        gW, gb = gl[i]
        gW[...] = h_in.T @ delta
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (cache[i] > 0.0)
    return loss, g


def grad(spec: NetworkSpec, params, batch) -> ParameterVector:
    X, y = batch.features, batch.labels
    _check_data(spec, X, y)
    theta = _values(params)
    _, g = grad_raw(spec, theta, X, y)
    layout = params.layout if isinstance(params, ParameterVector) else spec.layout()
    return ParameterVector(g, layout)


def rescale_layer_pair(params: ParameterVector, layer_index: int, alpha: float) -> ParameterVector:
    """Scale layer `layer_index` by alpha and the next layer's weights by 1/alpha.

    For relu networks the represented function is unchanged.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    layers = {g.layer for g in params.layout}
    if layer_index not in layers or layer_index + 1 not in layers:
        raise ValueError(f"layer {layer_index} has no following layer")
    v = params.values.copy()
    for g in params.layout:
        if g.layer == layer_index:
            v[g.offset:g.stop] *= alpha
        elif g.layer == layer_index + 1 and g.kind == "weight":
            v[g.offset:g.stop] /= alpha
    return params.with_values(v)


def filter_norms(params: ParameterVector) -> ParameterVector:
    """Each entry replaced by the Euclidean norm of the group that contains it."""
    F = np.empty(len(params))
    for g in params.layout:
        F[g.offset:g.stop] = np.linalg.norm(params.values[g.offset:g.stop])
    return params.with_values(F)

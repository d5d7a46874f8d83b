"""Multilayer perceptrons addressed through a single flat weight vector.

Flat layout (shared by SDE states and checkpoints): layers in order, first
layer first; within a layer the weight matrix of shape (out, in) in row-major
order, followed by the bias of length ``out``.

:func:`mlp_apply` accepts either one weight vector of shape (P,) shared by
all inputs, or a matrix of shape (R, P) holding separate weights for each of
R input rows.  The second form is how sampled SDE weight states drive the
CDE vector field, one weight path per Monte Carlo particle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str | None = "relu"
    output_activation: str | None = None
    uses_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"layer_sizes must hold >= 2 positive ints, got {sizes}")
        for kind in (self.hidden_activation, self.output_activation):
            if kind is not None and kind not in dc.ACTIVATIONS:
                raise ConfigError(f"unknown activation {kind!r}")
        if not self.uses_bias:
            raise ConfigError("bias-free layers are not supported")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return param_count(self)

    def slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) per layer in the flat vector."""
        out = []
        pos = 0
        for n, m in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + m * n)
            pos += m * n
            b = slice(pos, pos + m)
            pos += m
            out.append((w, (m, n), b))
        return out

    def activations(self) -> list[str | None]:
        n_layers = len(self.layer_sizes) - 1
        return [self.hidden_activation] * (n_layers - 1) + [self.output_activation]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("hidden_activation"), d.get("output_activation"))


def param_count(spec: MlpSpec) -> int:
    s = spec.layer_sizes
    return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


@dataclass(frozen=True)
class FlatWeights:
    data: np.ndarray
    spec: MlpSpec = field(compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != (self.spec.param_count,):
            raise DimensionError(f"expected {self.spec.param_count} weights, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def pack(cls, spec: MlpSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "FlatWeights":
        return cls(pack(spec, layers), spec)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.spec, self.data)


def pack(spec: MlpSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if len(layers) != len(spec.layer_sizes) - 1:
        raise DimensionError(f"expected {len(spec.layer_sizes) - 1} layers, got {len(layers)}")
    parts = []
    for (W, b), (_, wshape, _) in zip(layers, spec.slices()):
        W, b = np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if W.shape != wshape or b.shape != (wshape[0],):
            raise DimensionError(f"layer shapes {W.shape}/{b.shape} do not match {wshape}")
        parts += [W.reshape(-1), b]
    return np.concatenate(parts)


def unpack(spec: MlpSpec, data: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector (P,) or a batch of them (..., P) into per-layer (W, b)."""
    data = np.asarray(data)
    if data.shape[-1] != spec.param_count:
        raise DimensionError(f"expected trailing size {spec.param_count}, got {data.shape}")
    lead = data.shape[:-1]
    return [(data[..., w].reshape(lead + shape), data[..., b]) for w, shape, b in spec.slices()]


def init_weights(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for every weight and bias."""
    layers = []
    for _, (m, n), _ in spec.slices():
        bound = math.sqrt(1.0 / n)
        layers.append((rng.uniform(-bound, bound, size=(m, n)), rng.uniform(-bound, bound, size=m)))
    return pack(spec, layers)


def mlp_apply(spec: MlpSpec, weights, x, extra=None) -> dc.Node:
    """Feed-forward pass, differentiable w.r.t. both ``weights`` and ``x``.

    Shapes: weights (P,) with x (n,) or (R, n); or weights (R, P) with x (R, n).
    ``extra`` holds constant trailing input columns (e.g. time), shape
    (R, e) or (e,); the network input is ``[x, extra]`` without copying ``x``.
    """
    if isinstance(weights, FlatWeights):
        weights = weights.data
    weights, x = dc.as_node(weights), dc.as_node(x)
    wv, xv = weights.value, x.value
    ev = None if extra is None else np.asarray(extra, dtype=np.float64)
    n_extra = 0 if ev is None else ev.shape[-1]
    if xv.shape[-1] + n_extra != spec.n_in or xv.ndim > 2:
        raise DimensionError(f"input of shape {xv.shape} does not fit layer_sizes {spec.layer_sizes}")
    if wv.shape[-1] != spec.param_count:
        raise DimensionError(f"expected {spec.param_count} weights, got {wv.shape}")
    rowwise = wv.ndim == 2
    if rowwise and (xv.ndim != 2 or xv.shape[0] != wv.shape[0]):
        raise DimensionError(f"per-row weights {wv.shape} need inputs of shape ({wv.shape[0]}, {spec.n_in})")
    n_x = xv.shape[-1]

    layers = unpack(spec, wv)
    acts = spec.activations()
    inputs, pres, posts = [], [], []
    h = xv
    for i, ((W, b), kind) in enumerate(zip(layers, acts)):
        inputs.append(h)
        if rowwise:
            if i == 0 and ev is not None:
                pre = np.einsum("rmn,rn->rm", W[:, :, :n_x], h) + np.einsum("rmn,...n->rm", W[:, :, n_x:], ev) + b
            else:
                pre = np.einsum("rmn,rn->rm", W, h) + b
        elif i == 0 and ev is not None:
            pre = h @ W[:, :n_x].T + ev @ W[:, n_x:].T + b
        else:
            pre = h @ W.T + b
        post = dc.activation_value(kind, pre)
        pres.append(pre)
        posts.append(post)
        h = post
    slices = spec.slices()

    def bw(g):
        gw = np.empty_like(wv) if weights.requires_grad else None
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            kind = acts[i]
            if kind is not None:
                g = g * dc.activation_grad(kind, pres[i], posts[i])
            hin = inputs[i]
            wsl, (m, n), bsl = slices[i]
            if gw is not None:
                if rowwise:
                    gW = gw[:, wsl].reshape(g.shape[0], m, n)
                    if i == 0 and ev is not None:
                        np.multiply(g[:, :, None], hin[:, None, :], out=gW[:, :, :n_x])
                        gW[:, :, n_x:] = g[:, :, None] * np.broadcast_to(ev, (g.shape[0], n_extra))[:, None, :]
                    else:
                        np.multiply(g[:, :, None], hin[:, None, :], out=gW)
                    gw[:, bsl] = g
                else:
                    g2 = g.reshape(-1, g.shape[-1])
                    gW = gw[wsl].reshape(m, n)
                    if i == 0 and ev is not None:
                        gW[:, :n_x] = g2.T @ hin.reshape(-1, n_x)
                        gW[:, n_x:] = g2.T @ np.broadcast_to(ev, hin.shape[:-1] + (n_extra,)).reshape(-1, n_extra)
                    else:
                        gW[:] = g2.T @ hin.reshape(-1, hin.shape[-1])
                    gw[bsl] = g2.sum(axis=0)
            if i > 0 or x.requires_grad:
                Wx = W[..., :n_x] if (i == 0 and ev is not None) else W
                g = np.einsum("rmn,rm->rn", Wx, g) if rowwise else g @ Wx
        if gw is not None:
            dc.accumulate(weights, gw)
        if x.requires_grad:
            dc.accumulate(x, g)

    return dc.Node.from_op(h, (weights, x), bw, "mlp")


def mc_dropout(x, p: float, rng: np.random.Generator) -> dc.Node:
    """Inverted dropout: zero each coordinate with probability p, scale survivors by 1/(1-p).

    Always active; used at training and prediction time alike.
    """
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    x = dc.as_node(x)
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return dc.mul(x, keep)


def save_checkpoint(path: str | Path, groups: dict[str, tuple[MlpSpec | None, np.ndarray]],
                    extra: dict | None = None) -> None:
    """Write parameter groups as ``{"groups": {name: {"spec", "shape", "data"}}, ...extra}``."""
    payload = {"format": "bncde-checkpoint-v1", "groups": {}}
    for name, (spec, data) in groups.items():
        arr = np.asarray(data, dtype=np.float64)
        payload["groups"][name] = {
            "spec": spec.to_dict() if spec is not None else None,
            "shape": list(arr.shape),
            "data": arr.reshape(-1).tolist(),
        }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, tuple[MlpSpec | None, np.ndarray]], dict]:
    payload = json.loads(Path(path).read_text())
    groups = {}
    for name, g in payload.pop("groups").items():
        spec = MlpSpec.from_dict(g["spec"]) if g["spec"] is not None else None
        groups[name] = (spec, np.asarray(g["data"], dtype=np.float64).reshape(g["shape"]))
    return groups, payload

"""Backbone classifier and the two auxiliary networks.

The backbone is a plain relu MLP. The perturbation net maps batch statistics
of a hidden layer to a diagonal Gaussian ``(mu, sigma)`` over that layer's
features; the mixup net maps the first layer's ``(mu, sigma)`` to the Beta
shape parameters ``(a, b)`` and the smoothing probability ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .rng import Rng

STD_EPS = 1e-8
# Negative slope of the auxiliary nets' hidden layer. The source-only objective
# never rewards (mu, sigma) for tracking the input statistics, so plain relu
# units drift dead and the net collapses to a constant; a leak keeps the map
# input-dependent, which the uncertainty score relies on.
LEAK = 0.1


def _dense_init(rng: Rng, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)


@dataclass
class Backbone:
    sizes: tuple[int, ...]
    params: list[Tensor]
    perturb_layers: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.perturb_layers = tuple(sorted(set(int(l) for l in self.perturb_layers)))
        if len(self.sizes) < 2:
            raise ValueError("backbone needs at least an input and an output size")
        if len(self.params) != 2 * self.n_layers:
            raise ValueError("expected one weight and one bias per layer")
        for l in range(self.n_layers):
            w, b = self.params[2 * l], self.params[2 * l + 1]
            if w.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise ShapeError(f"layer {l}: weight {w.shape} / bias {b.shape} do not chain with sizes {self.sizes}")
        for l in self.perturb_layers:
            if not 0 <= l < self.n_layers - 1:
                raise ValueError(f"perturb layer {l} is not a hidden layer")

    @classmethod
    def init(cls, sizes, rng: Rng, perturb_layers=(0,)) -> "Backbone":
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(ag.parameter(_dense_init(rng, fan_in, fan_out, 2.0)))
            params.append(ag.parameter(np.zeros(fan_out)))
        return cls(tuple(sizes), params, tuple(perturb_layers))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def layers(self) -> list[tuple[Tensor, Tensor, str]]:
        acts = ["relu"] * (self.n_layers - 1) + ["identity"]
        return [(self.params[2 * l], self.params[2 * l + 1], acts[l]) for l in range(self.n_layers)]

    def width(self, layer: int) -> int:
        return self.sizes[layer + 1]

    def with_params(self, params: list[Tensor]) -> "Backbone":
        return Backbone(self.sizes, list(params), self.perturb_layers)


Hook = Callable[[int, Tensor], Tensor]


def forward_with_features(
    backbone: Backbone,
    x,
    injected: Mapping[int, Tensor] | None = None,
    params: list[Tensor] | None = None,
    hook: Hook | None = None,
) -> tuple[Tensor, Tensor, dict[int, Tensor]]:
    """Run the backbone, exposing post-activation features of perturbed layers.

    ``injected[l]`` replaces the feature of layer ``l`` for everything
    downstream; ``hook(l, h)`` does the same but computes the replacement from
    the recorded feature. ``params`` overrides the backbone's own parameters
    (used for adapted weights). Returns ``(logits, z, features)`` where ``z``
    is the last pre-activation output, identical to the logits here.
    """
    params = backbone.params if params is None else params
    injected = injected or {}
    for l in injected:
        if l not in backbone.perturb_layers:
            raise ValueError(f"injected feature for unknown layer {l}")
    h = ag.as_tensor(x)
    if h.ndim != 2 or h.shape[1] != backbone.sizes[0]:
        raise ShapeError(f"forward: input shape {h.shape} does not match input width {backbone.sizes[0]}")
    features: dict[int, Tensor] = {}
    last = backbone.n_layers - 1
    for l in range(backbone.n_layers):
        a = ag.add(ag.matmul(h, params[2 * l]), params[2 * l + 1])
        if l == last:
            return a, a, features
        h = ag.relu(a)
        if l in backbone.perturb_layers:
            features[l] = h
            if l in injected:
                if injected[l].shape != h.shape:
                    raise ShapeError(f"injected feature for layer {l} has shape {injected[l].shape}, expected {h.shape}")
                h = injected[l]
            elif hook is not None:
                h = hook(l, h)
    raise AssertionError("unreachable")


def forward(backbone: Backbone, x, params: list[Tensor] | None = None) -> Tensor:
    return forward_with_features(backbone, x, params=params)[0]


def batch_statistics(features: Tensor) -> Tensor:
    """Concatenated per-dimension mean and population std over the batch."""
    m = ag.mean(features, 0)
    d = ag.sub(features, m)
    s = ag.sqrt(ag.add(ag.mean(ag.mul(d, d), 0), STD_EPS))
    return ag.concat([m, s])


def leaky_relu(x: Tensor, slope: float = LEAK) -> Tensor:
    return ag.sub(ag.relu(x), ag.mul(ag.relu(ag.neg(x)), slope))


def _two_layer(x: Tensor, p: list[Tensor]) -> Tensor:
    row = ag.reshape(x, (1, x.shape[0]))
    hidden = leaky_relu(ag.add(ag.matmul(row, p[0]), p[1]))
    out = ag.add(ag.matmul(hidden, p[2]), p[3])
    return ag.reshape(out, (out.shape[1],))


def _two_layer_init(rng: Rng, n_in: int, hidden: int, n_out: int) -> list[Tensor]:
    return [
        ag.parameter(_dense_init(rng, n_in, hidden, 1.0)),
        ag.parameter(np.zeros(hidden)),
        ag.parameter(np.zeros((hidden, n_out))),
        ag.parameter(np.zeros(n_out)),
    ]


@dataclass
class PerturbNet:
    widths: dict[int, int]
    params: dict[int, list[Tensor]]
    floor: float = 1e-6

    @classmethod
    def init(cls, widths: Mapping[int, int], rng: Rng, hidden: int = 32, floor: float = 1e-6) -> "PerturbNet":
        params = {l: _two_layer_init(rng.fork("layer", l), 2 * w, hidden, 2 * w) for l, w in sorted(widths.items())}
        return cls(dict(sorted(widths.items())), params, floor)

    def parameters(self) -> list[Tensor]:
        return [p for l in sorted(self.params) for p in self.params[l]]

    def set_parameters(self, flat: list[Tensor]) -> None:
        it = iter(flat)
        self.params = {l: [next(it) for _ in self.params[l]] for l in sorted(self.params)}

    def layer_for(self, width: int) -> int:
        matches = [l for l, w in self.widths.items() if w == width]
        if not matches:
            raise ShapeError(f"no perturbation layer registered for width {width}")
        return matches[0]


def infer_gaussian(pnet: PerturbNet, features: Tensor, layer: int | None = None) -> tuple[Tensor, Tensor]:
    """Domain-level ``(mu, sigma)`` for one layer, shared across the batch."""
    if features.ndim != 2:
        raise ShapeError(f"infer_gaussian: expected (batch, width) features, got {features.shape}")
    width = features.shape[1]
    if layer is None:
        layer = pnet.layer_for(width)
    elif pnet.widths.get(layer) != width:
        raise ShapeError(f"infer_gaussian: layer {layer} is not registered with width {width}")
    out = _two_layer(batch_statistics(features), pnet.params[layer])
    mu = ag.getitem(out, slice(0, width))
    sigma = ag.add(ag.softplus(ag.getitem(out, slice(width, 2 * width))), pnet.floor)
    return mu, sigma


@dataclass
class MixupNet:
    width: int
    params: list[Tensor]
    floor: float = 1e-6

    @classmethod
    def init(cls, width: int, rng: Rng, hidden: int = 32, floor: float = 1e-6) -> "MixupNet":
        return cls(width, _two_layer_init(rng, 2 * width, hidden, 3), floor)

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def set_parameters(self, flat: list[Tensor]) -> None:
        self.params = list(flat)


def infer_mixup_params(mnet: MixupNet, mu: Tensor, sigma: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Beta shapes ``a, b > 0`` and smoothing probability ``tau`` in (0, 1)."""
    if mu.shape != (mnet.width,) or sigma.shape != (mnet.width,):
        raise ShapeError(f"infer_mixup_params: expected width {mnet.width}, got {mu.shape} and {sigma.shape}")
    raw = _two_layer(ag.concat([mu, sigma]), mnet.params)
    a = ag.add(ag.softplus(ag.getitem(raw, 0)), mnet.floor)
    b = ag.add(ag.softplus(ag.getitem(raw, 1)), mnet.floor)
    tau = ag.sigmoid(ag.getitem(raw, 2))
    return a, b, tau


@dataclass
class UDGModel:
    """Backbone plus auxiliary nets, with named parameter groups."""

    backbone: Backbone
    pnet: PerturbNet
    mnet: MixupNet
    groups: tuple[str, ...] = field(default=("theta", "phi_p", "phi_m"), init=False)

    @classmethod
    def init(cls, sizes, rng: Rng, perturb_layers=(0,), aux_hidden: int = 32, floor: float = 1e-6) -> "UDGModel":
        backbone = Backbone.init(sizes, rng.fork("theta"), perturb_layers)
        widths = {l: backbone.width(l) for l in backbone.perturb_layers}
        pnet = PerturbNet.init(widths, rng.fork("phi_p"), aux_hidden, floor)
        first = backbone.perturb_layers[0]
        mnet = MixupNet.init(backbone.width(first), rng.fork("phi_m"), aux_hidden, floor)
        return cls(backbone, pnet, mnet)

    @property
    def first_layer(self) -> int:
        return self.backbone.perturb_layers[0]

    def group(self, name: str) -> list[Tensor]:
        if name == "theta":
            return list(self.backbone.params)
        if name == "phi_p":
            return self.pnet.parameters()
        if name == "phi_m":
            return self.mnet.parameters()
        raise KeyError(name)

    def set_group(self, name: str, params: list[Tensor]) -> None:
        params = list(params)
        if name == "theta":
            self.backbone = self.backbone.with_params(params)
        elif name == "phi_p":
            self.pnet.set_parameters(params)
        elif name == "phi_m":
            self.mnet.set_parameters(params)
        else:
            raise KeyError(name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for l, (w, b, _) in enumerate(self.backbone.layers):
            out += [(f"theta.{l}.weight", w), (f"theta.{l}.bias", b)]
        for l in sorted(self.pnet.params):
            for i, p in enumerate(self.pnet.params[l]):
                out.append((f"phi_p.{l}.{i}", p))
        for i, p in enumerate(self.mnet.params):
            out.append((f"phi_m.{i}", p))
        return out

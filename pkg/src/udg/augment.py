"""Feature perturbation, learnable label mixup and adversarial ascent on phi_p."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import Backbone, PerturbNet, forward_with_features, infer_gaussian
from .optim import clip_grad_norm
from .rng import Rng

PERTURB_MODES = ("learned", "random_gaussian", "deterministic", "random_mu", "random_sigma")


@dataclass(frozen=True)
class AdvConfig:
    beta: float = 1.0
    steps: int = 5
    lr: float = 1e-2
    clip: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("adversarial lr must be > 0")
        if self.clip < 0:
            raise ValueError("clip must be >= 0")


@dataclass
class AugmentedBatch:
    h_plus: dict[int, Tensor]
    y_plus: Tensor
    lam: float
    noise: dict[int, np.ndarray] = field(default_factory=dict)
    smoothing_applied: bool = False


def gaussian_reparam_sample(mu: Tensor, sigma: Tensor, rng: Rng | None = None, eps=None) -> Tensor:
    """``mu + sigma * eps`` with standard normal ``eps`` held constant.

    ``eps`` defaults to a fresh draw of ``mu``'s shape; a batch-shaped ``eps``
    of shape ``(n, d)`` broadcasts against ``(d,)`` parameters.
    """
    mu, sigma = ag.as_tensor(mu), ag.as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ag.ShapeError(f"gaussian_reparam_sample: mu {mu.shape} and sigma {sigma.shape} differ")
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_reparam_sample: sigma must be strictly positive")
    if eps is None:
        if rng is None:
            raise ValueError("need either rng or eps")
        eps = rng.normal(mu.shape)
    return ag.add(mu, ag.mul(sigma, Tensor._wrap(np.asarray(eps, dtype=np.float64))))


def perturb_features(h: Tensor, mu: Tensor, sigma: Tensor, rng: Rng | None = None, eps=None) -> tuple[Tensor, Tensor]:
    """``h + softplus(e)`` with ``e ~ N(mu, sigma^2)`` drawn per feature entry."""
    if eps is None:
        if rng is None:
            raise ValueError("need either rng or eps")
        eps = rng.normal(h.shape)
    e = gaussian_reparam_sample(mu, sigma, eps=eps)
    return ag.add(h, ag.softplus(e)), e


def gaussian_for_mode(pnet: PerturbNet, h: Tensor, layer: int, mode: str) -> tuple[Tensor, Tensor]:
    width = h.shape[1]
    if mode == "random_gaussian":
        return Tensor(np.zeros(width)), Tensor(np.ones(width))
    mu, sigma = infer_gaussian(pnet, h, layer)
    if mode == "random_mu":
        return Tensor(np.zeros(width)), sigma
    if mode == "random_sigma":
        return mu, Tensor(np.ones(width))
    if mode in ("learned", "deterministic"):
        return mu, sigma
    raise ValueError(f"unknown perturbation mode {mode!r}")


def perturb_for_mode(h: Tensor, mu: Tensor, sigma: Tensor, eps: np.ndarray, mode: str) -> Tensor:
    if mode == "deterministic":
        return ag.add(h, ag.softplus(mu))
    return perturb_features(h, mu, sigma, eps=eps)[0]


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def smooth_label(y, rho: float, c: int | None = None) -> Tensor:
    """Put ``rho`` on the true class and ``(1 - rho) / (c - 1)`` on every other."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    c = y.shape[-1] if c is None else c
    if y.shape[-1] != c:
        raise ValueError(f"smooth_label: labels have {y.shape[-1]} classes, expected {c}")
    if c < 2:
        raise ValueError("smooth_label: need at least two classes")
    if not 0 < rho < 1:
        raise ValueError("smooth_label: rho must lie in (0, 1)")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("smooth_label: input is not one-hot")
    off = (1.0 - rho) / (c - 1)
    return Tensor(np.where(y == 1, rho, off))


def soft_targets(y: Tensor, rho: float, tau: Tensor, mode: str = "relaxed", rng: Rng | None = None, coins=None) -> tuple[Tensor, bool]:
    """Label-smoothed targets applied with probability ``tau``.

    ``relaxed`` uses the expectation ``tau * smooth + (1 - tau) * y``. ``hard``
    draws a Bernoulli(tau) coin and passes the gradient straight through to tau.
    ``coins`` (hard mode) gives pre-drawn 0/1 outcomes, one per row.
    Returns the targets and whether smoothing was applied to any row.
    """
    y = ag.as_tensor(y)
    smooth = smooth_label(y, rho)
    if mode == "relaxed":
        weight, applied = tau, True
    elif mode == "hard":
        if coins is None:
            coins = float(rng.uniform() < tau.data)
        coins = np.asarray(coins, dtype=np.float64)
        weight = ag.add(ag.sub(tau, Tensor(tau.data)), Tensor(coins))
        applied = bool(np.any(coins))
    else:
        raise ValueError(f"unknown tau mode {mode!r}")
    return _convex(weight, ag.sub(1.0, weight), smooth, y), applied


def kumaraswamy_quantile(u, a, b) -> Tensor:
    """Inverse CDF ``(1 - (1 - u)^(1/b))^(1/a)``, differentiable in ``a`` and ``b``."""
    log1mu = Tensor(np.log1p(-np.asarray(u, dtype=np.float64)))
    inner = ag.exp(ag.div(log1mu, b))
    return ag.exp(ag.div(ag.log(ag.sub(1.0, inner)), a))


def sample_lambda(a, b, rng: Rng | None = None, u=None) -> Tensor:
    """Mixing weight from Kumaraswamy(a, b), the pathwise stand-in for Beta(a, b)."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if np.any(a.data <= 0) or np.any(b.data <= 0):
        raise ValueError("sample_lambda: shape parameters must be positive")
    if u is None:
        u = rng.uniform()
    return kumaraswamy_quantile(u, a, b)


def _convex(lam: Tensor, rest: Tensor, a: Tensor, b: Tensor) -> Tensor:
    if lam.ndim == 1:
        return ag.add(ag.scale_rows(a, lam), ag.scale_rows(b, rest))
    return ag.add(ag.mul(lam, a), ag.mul(rest, b))


def mixup_domain(h: Tensor, h_plus: Tensor, y: Tensor, y_tilde: Tensor, lam) -> tuple[Tensor, Tensor]:
    """Convex combination of the source and augmented domain in both spaces.

    ``lam`` is a scalar shared by the batch, or one weight per row.
    """
    lam = ag.as_tensor(lam)
    if np.any(lam.data < 0) or np.any(lam.data > 1):
        raise ValueError(f"mixup_domain: lambda {lam.data} outside [0, 1]")
    if lam.ndim == 1 and lam.shape[0] != h.shape[0]:
        raise ag.ShapeError(f"mixup_domain: {lam.shape[0]} row weights for {h.shape[0]} rows")
    rest = ag.sub(1.0, lam)
    return _convex(lam, rest, h, h_plus), _convex(lam, rest, y, y_tilde)


def draw_noise(backbone: Backbone, n: int, rng: Rng) -> dict[int, np.ndarray]:
    return {l: rng.fork("eps", l).normal((n, backbone.width(l))) for l in backbone.perturb_layers}


def adversarial_objective(
    pnet: PerturbNet,
    backbone: Backbone,
    x,
    y: Tensor,
    noise: dict[int, np.ndarray],
    beta: float,
    mode: str = "learned",
) -> Tensor:
    """Task loss on the perturbed domain minus ``beta`` times mean ``||z - z+||^2``."""
    frozen = [p.detach() for p in backbone.params]
    z = forward_with_features(backbone, x, params=frozen)[0]

    def hook(layer, h):
        mu, sigma = gaussian_for_mode(pnet, h, layer, mode)
        return perturb_for_mode(h, mu, sigma, noise[layer], mode)

    z_plus = forward_with_features(backbone, x, params=frozen, hook=hook)[0]
    penalty = ag.mean(ag.sq_l2(z, z_plus))
    return ag.sub(ag.softmax_xent(z_plus, y), ag.mul(penalty, beta))


def adversarial_maximize(
    pnet: PerturbNet,
    backbone: Backbone,
    x,
    y: Tensor,
    cfg: AdvConfig,
    rng: Rng,
    mode: str = "learned",
) -> list[float]:
    """Gradient ascent on phi_p only; the backbone is never touched.

    One noise draw is frozen across the ascent steps. Returns the objective
    before the first step and after every step (``steps + 1`` values), or an
    empty list when ``steps == 0``.
    """
    if cfg.steps == 0 or mode == "random_gaussian":
        return []
    noise = draw_noise(backbone, ag.as_tensor(x).shape[0], rng)
    trajectory = []
    for _ in range(cfg.steps):
        params = pnet.parameters()
        obj = adversarial_objective(pnet, backbone, x, y, noise, cfg.beta, mode)
        grads = clip_grad_norm(ag.backward(obj, params, allow_unused=True), cfg.clip)
        trajectory.append(obj.item())
        pnet.set_parameters([ag.parameter(p.data + cfg.lr * g.data) for p, g in zip(params, grads)])
    with ag.no_grad():
        trajectory.append(adversarial_objective(pnet, backbone, x, y, noise, cfg.beta, mode).item())
    return trajectory

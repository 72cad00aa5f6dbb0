"""Bayesian meta-learning loop over source and augmented domains.

One iteration, in order:

1. meta-train: ``theta* = theta - inner_lr * grad L(theta; S)``
2. snapshot the current ``(mu, sigma)`` under ``theta*`` as the KL prior
3. adversarial ascent of the perturbation net on ``L(theta; S+) - beta ||z - z+||^2``
4. meta-test: K Monte-Carlo augmented batches (perturbation + learnable mixup)
   evaluated under ``theta*``, plus the KL between the current and prior
   perturbation distributions
5. meta-update: one optimizer step on theta, phi_p and phi_m for
   ``(L(theta; S) + mean_k L(theta*; S+_k)) / 2 + kl_weight * KL``
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .augment import (
    AdvConfig,
    AugmentedBatch,
    adversarial_maximize,
    gaussian_for_mode,
    mixup_domain,
    one_hot,
    perturb_for_mode,
    sample_lambda,
    soft_targets,
)
from .bench import DomainDataset, NonFiniteLossError, batch_indices, init_model
from .config import TrainConfig
from .metrics import MetaStepReport, write_metrics_csv
from .model import Backbone, PerturbNet, UDGModel, forward, forward_with_features, infer_mixup_params
from .optim import clip_grad_norm, make_optimizer
from .rng import Rng

GROUPS = ("theta", "phi_p", "phi_m")


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> ag.Tensor:
    """KL(q || p) between diagonal Gaussians parameterised by std, summed over dims."""
    mu_q, sigma_q, mu_p, sigma_p = (ag.as_tensor(t) for t in (mu_q, sigma_q, mu_p, sigma_p))
    if np.any(sigma_q.data <= 0) or np.any(sigma_p.data <= 0):
        raise ValueError("kl_diag_gaussian: sigmas must be strictly positive")
    d = ag.sub(mu_q, mu_p)
    ratio = ag.div(ag.add(ag.mul(sigma_q, sigma_q), ag.mul(d, d)), ag.mul(2.0, ag.mul(sigma_p, sigma_p)))
    per_dim = ag.sub(ag.add(ag.sub(ag.log(sigma_p), ag.log(sigma_q)), ratio), 0.5)
    return ag.sum_(per_dim)


def inner_adapt(backbone: Backbone, x, y, alpha: float, exact: bool = False, params=None):
    """One gradient step on the source batch. Returns ``(theta_star, loss)``.

    With ``exact=True`` the step stays on the tape, so gradients through
    ``theta_star`` include the second-order term.
    """
    if alpha < 0:
        raise ValueError("inner learning rate must be >= 0")
    params = list(backbone.params if params is None else params)
    loss = ag.softmax_xent(forward(backbone, x, params=params), ag.as_tensor(y))
    if alpha == 0:
        return params, loss
    grads = ag.backward(loss, params, create_graph=exact)
    return [ag.sub(p, ag.mul(g, alpha)) for p, g in zip(params, grads)], loss


def _detached_pnet(pnet: PerturbNet) -> PerturbNet:
    return PerturbNet(pnet.widths, {l: [p.detach() for p in ps] for l, ps in pnet.params.items()}, pnet.floor)


def gaussians(model: UDGModel, features: dict[int, ag.Tensor], mode: str, pnet: PerturbNet | None = None):
    pnet = pnet or model.pnet
    return {l: gaussian_for_mode(pnet, h, l, mode) for l, h in features.items()}


def prior_snapshot(model: UDGModel, theta_star, x, mode: str) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    with ag.no_grad():
        frozen = [p.detach() for p in theta_star]
        feats = forward_with_features(model.backbone, x, params=frozen)[2]
        return {l: (mu.data, sigma.data) for l, (mu, sigma) in gaussians(model, feats, mode).items()}


@dataclass
class MetaTestResult:
    mc_loss: ag.Tensor
    kl: ag.Tensor
    mean_sigma: float
    mean_mu: float
    a: float = float("nan")
    b: float = float("nan")
    tau: float = float("nan")
    batches: list[AugmentedBatch] = field(default_factory=list)


def _per_row(v: ag.Tensor, n: int) -> ag.Tensor:
    """Repeat each entry of a length-K vector ``n`` times, keeping the tape."""
    k = v.shape[0]
    select = ag.Tensor(np.repeat(np.eye(k), n, axis=0))
    return ag.reshape(ag.matmul(select, ag.reshape(v, (k, 1))), (k * n,))


def meta_test_loss(
    model: UDGModel,
    theta_star,
    x,
    y,
    cfg: TrainConfig,
    rng: Rng,
    prior: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> MetaTestResult:
    """Monte-Carlo meta-test loss over ``cfg.mc_samples`` augmented batches.

    The K augmented copies of the batch are stacked and pushed through the
    backbone together; the mean over the stack equals the mean of the K
    per-copy losses. The KL term compares the current perturbation
    distribution against ``prior`` (zero when no prior is given).
    """
    x = np.asarray(x.data if isinstance(x, ag.Tensor) else x, dtype=np.float64)
    y = ag.as_tensor(y)
    backbone = model.backbone
    mode = cfg.perturb_mode
    first = model.first_layer
    K, n = cfg.mc_samples, y.shape[0]
    feats = forward_with_features(backbone, x, params=theta_star)[2]
    params = gaussians(model, feats, mode)
    mu1, sigma1 = params[first]

    mixup = cfg.mixup_mode
    a = b = tau = None
    if mixup == "learned":
        # phi_m reads (mu, sigma) as data; otherwise the mixup objective could
        # inflate the perturbation just to drive lambda to 1.
        a, b, tau = infer_mixup_params(model.mnet, mu1.detach(), sigma1.detach())
    elif mixup == "random":
        a, b, tau = ag.Tensor(1.0), ag.Tensor(1.0), ag.Tensor(0.5)

    krngs = [rng.fork("sample", k) for k in range(K)]
    noise = {l: np.concatenate([r.fork("eps", l).normal((n, backbone.width(l))) for r in krngs]) for l in backbone.perturb_layers}
    y_stack = ag.Tensor(np.tile(y.data, (K, 1)))
    lam_rows = y_tilde = None
    applied = [False] * K
    if mixup != "none":
        if cfg.fixed_lambda is not None:
            lam = ag.Tensor(np.full(K, cfg.fixed_lambda))
        else:
            lam = sample_lambda(a, b, u=np.array([r.fork("lambda").uniform() for r in krngs]))
        lam_rows = _per_row(lam, n)
        coins = None
        if cfg.tau_mode == "hard":
            coins = np.array([float(r.fork("tau").uniform() < tau.data) for r in krngs])
            applied = [bool(c) for c in coins]
            coins = np.repeat(coins, n)
        else:
            applied = [True] * K
        y_tilde = soft_targets(y_stack, cfg.rho, tau, cfg.tau_mode, coins=coins)[0]

    record: dict = {}

    def hook(layer, h):
        mu, sigma = params[layer]
        h_plus = perturb_for_mode(h, mu, sigma, noise[layer], mode)
        record[layer] = h_plus
        if layer == first and lam_rows is not None:
            h_plus, record["y_plus"] = mixup_domain(h, h_plus, y_stack, y_tilde, lam_rows)
        return h_plus

    logits = forward_with_features(backbone, np.tile(x, (K, 1)), params=theta_star, hook=hook)[0]
    y_plus = record.get("y_plus", y_stack)
    mc_loss = ag.softmax_xent(logits, y_plus)

    batches = []
    for k in range(K):
        rows = slice(k * n, (k + 1) * n)
        batches.append(
            AugmentedBatch(
                {l: ag.Tensor(record[l].data[rows]) for l in backbone.perturb_layers},
                ag.Tensor(y_plus.data[rows]),
                float("nan") if lam_rows is None else float(lam_rows.data[k * n]),
                {l: noise[l][rows] for l in backbone.perturb_layers},
                applied[k],
            )
        )

    kl = ag.Tensor(0.0)
    if prior is not None:
        # The KL regularises the perturbation net only: it reads the features
        # as data, so theta is never pulled around to move (mu, sigma).
        still = {l: f.detach() for l, f in feats.items()}
        kl_params = gaussians(model, still, mode, _detached_pnet(model.pnet) if cfg.no_min_phi_p else None)
        for layer, (mu_p, sigma_p) in sorted(prior.items()):
            mu_q, sigma_q = kl_params[layer]
            kl = ag.add(kl, kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p))

    return MetaTestResult(
        mc_loss,
        kl,
        float(np.mean([s.data.mean() for _, s in params.values()])),
        float(np.mean([m.data.mean() for m, _ in params.values()])),
        a.item() if a is not None else float("nan"),
        b.item() if b is not None else float("nan"),
        tau.item() if tau is not None else float("nan"),
        batches,
    )


def meta_iteration(model: UDGModel, optimizer, x, y, cfg: TrainConfig, iteration: int) -> MetaStepReport:
    """One full meta-train / augment / meta-test / meta-update step (mutates ``model``)."""
    start = time.perf_counter()
    rng = Rng(cfg.seed).fork("iter", iteration)
    mode = cfg.perturb_mode
    y = ag.as_tensor(y)

    alpha = 0.0 if cfg.no_meta else cfg.inner_lr
    theta_star, train_loss = inner_adapt(model.backbone, x, y, alpha, exact=cfg.meta_grad == "exact")
    prior = prior_snapshot(model, theta_star, x, mode)

    trajectory: list[float] = []
    if not cfg.no_adversarial:
        adv = AdvConfig(cfg.beta, cfg.adv_steps, cfg.adv_lr, cfg.grad_clip)
        trajectory = adversarial_maximize(model.pnet, model.backbone, x, y, adv, rng.fork("adv"), mode)

    result = meta_test_loss(model, theta_star, x, y, cfg, rng.fork("mc"), prior)
    total = ag.add(ag.mul(ag.add(train_loss, result.mc_loss), 0.5), ag.mul(result.kl, cfg.kl_weight))

    report = MetaStepReport(
        iteration,
        train_loss.item(),
        result.mc_loss.item(),
        result.kl.item(),
        result.mean_sigma,
        result.mean_mu,
        result.a,
        result.b,
        result.tau,
        trajectory,
    )
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(f"non-finite meta objective at iteration {iteration}", report)

    groups = {g: model.group(g) for g in GROUPS}
    flat = [p for g in GROUPS for p in groups[g]]
    grads = ag.backward(total, flat, allow_unused=True)
    pos = 0
    for g in GROUPS:
        count = len(groups[g])
        step = clip_grad_norm(grads[pos : pos + count], cfg.grad_clip)
        model.set_group(g, optimizer.step(g, groups[g], step))
        pos += count
    if cfg.record_wall_time:
        report.wall_ms = (time.perf_counter() - start) * 1000.0
    return report


@dataclass
class TrainState:
    model: UDGModel
    optimizer: object
    config: TrainConfig
    iteration: int = 0
    kind: str = "udg"


def new_state(cfg: TrainConfig, source: DomainDataset) -> TrainState:
    return TrainState(init_model(cfg, source), make_optimizer(cfg.optimizer, cfg.outer_lr), cfg)


def train(
    cfg: TrainConfig,
    source: DomainDataset,
    state: TrainState | None = None,
    checkpoint_dir=None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[MetaStepReport]]:
    """Run meta-iterations from ``state.iteration`` up to ``cfg.iterations``.

    Every draw of randomness is keyed by ``(seed, iteration)``, so resuming
    from a checkpointed state continues the uninterrupted trajectory exactly.
    """
    from .checkpoint import save_checkpoint, state_to_checkpoint

    state = state or new_state(cfg, source)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    y_all = one_hot(source.labels, source.classes)
    history = []
    for it in range(state.iteration, end):
        idx = batch_indices(len(source), cfg.batch_size, it, cfg.seed)
        history.append(meta_iteration(state.model, state.optimizer, source.inputs[idx], y_all[idx], cfg, it))
        state.iteration = it + 1
        if checkpoint_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.iteration:06d}.json", state_to_checkpoint(state))
    return state, history


def few_shot_adapt(backbone: Backbone, target: DomainDataset, steps: int, lr: float) -> Backbone:
    """Fine-tune the backbone alone on a handful of labelled target examples."""
    if len(target) == 0:
        raise ValueError("empty target set")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    y = ag.Tensor(one_hot(target.labels, target.classes))
    params = [ag.parameter(p.data) for p in backbone.params]
    for _ in range(steps):
        loss = ag.softmax_xent(forward(backbone, target.inputs, params=params), y)
        grads = ag.backward(loss, params)
        params = [ag.parameter(p.data - lr * g.data) for p, g in zip(params, grads)]
    return backbone.with_params(params)


def save_history(path, history) -> None:
    write_metrics_csv(path, history)

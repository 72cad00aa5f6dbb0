"""Shared fixtures-as-functions for the test modules and the acceptance run."""

import numpy as np

import udg.autograd as ag
from udg.config import TrainConfig


def silence_perturbation(model, level: float = -40.0) -> None:
    """Make every perturbation layer emit mu = level and sigma ~= floor.

    softplus(level) is ~4e-18 here, so the perturbation is numerically zero
    and the gradient reaching phi_p is too.
    """
    for layer, ps in model.pnet.params.items():
        w1, b1, w2, b2 = ps
        model.pnet.params[layer] = [w1, b1, ag.parameter(np.zeros(w2.shape)), ag.parameter(np.full(b2.shape, level))]


def degenerate_config(**overrides) -> TrainConfig:
    """K=1, lambda fixed at 1, no inner step, no KL, no ascent."""
    base = dict(mc_samples=1, fixed_lambda=1.0, inner_lr=0.0, kl_weight=0.0, adv_steps=0)
    base.update(overrides)
    return TrainConfig(**base)

"""Plain SGD and Adam over named parameter groups.

Parameters are immutable tensors, so ``step`` returns fresh leaf tensors.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, parameter


def clip_grad_norm(grads: list[Tensor], max_norm: float) -> list[Tensor]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads)))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [Tensor(g.data * scale) for g in grads]


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, group: str, params: list[Tensor], grads: list[Tensor]) -> list[Tensor]:
        return [parameter(p.data - self.lr * g.data) for p, g in zip(params, grads)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if state:
            raise ValueError("SGD carries no state")


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, list[np.ndarray]] = {}
        self.v: dict[str, list[np.ndarray]] = {}
        self.t: dict[str, int] = {}

    def step(self, group: str, params: list[Tensor], grads: list[Tensor]) -> list[Tensor]:
        if group not in self.m:
            self.m[group] = [np.zeros(p.shape) for p in params]
            self.v[group] = [np.zeros(p.shape) for p in params]
            self.t[group] = 0
        self.t[group] += 1
        t = self.t[group]
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            m = self.beta1 * self.m[group][i] + (1 - self.beta1) * g.data
            v = self.beta2 * self.v[group][i] + (1 - self.beta2) * g.data * g.data
            self.m[group][i], self.v[group][i] = m, v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            out.append(parameter(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for group in sorted(self.m):
            state[f"adam.{group}.t"] = np.array([float(self.t[group])])
            for i, (m, v) in enumerate(zip(self.m[group], self.v[group])):
                state[f"adam.{group}.m.{i}"] = m
                state[f"adam.{group}.v.{i}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in state.items():
            _, group, kind, *rest = key.split(".")
            if kind == "t":
                self.t[group] = int(arr[0])
                continue
            i = int(rest[0])
            bucket = (self.m if kind == "m" else self.v).setdefault(group, [])
            while len(bucket) <= i:
                bucket.append(None)
            bucket[i] = np.array(arr)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")

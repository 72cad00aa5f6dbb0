"""Training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

PERTURB_FLAGS = ("random_gaussian", "deterministic_perturbation", "random_mu", "random_sigma")
MIXUP_FLAGS = ("no_mixup", "random_mixup")
STRATEGY_FLAGS = ("no_adversarial", "no_meta", "no_min_phi_p")
ABLATION_FLAGS = PERTURB_FLAGS + MIXUP_FLAGS + STRATEGY_FLAGS


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    inner_lr: float = 0.1
    outer_lr: float = 0.1
    optimizer: str = "sgd"
    mc_samples: int = 15
    beta: float = 1.0
    adv_steps: int = 5
    adv_lr: float = 0.01
    rho: float = 0.9
    kl_weight: float = 1.0
    grad_clip: float = 5.0
    iterations: int = 1000
    batch_size: int = 64
    seed: int = 0
    meta_grad: str = "first_order"
    tau_mode: str = "relaxed"
    hidden: tuple[int, ...] = (64, 64)
    perturb_layers: tuple[int, ...] = (0,)
    aux_hidden: int = 32
    floor: float = 1e-6
    fixed_lambda: float | None = None
    checkpoint_every: int = 0
    record_wall_time: bool = False
    random_gaussian: bool = False
    deterministic_perturbation: bool = False
    random_mu: bool = False
    random_sigma: bool = False
    no_mixup: bool = False
    random_mixup: bool = False
    no_adversarial: bool = False
    no_meta: bool = False
    no_min_phi_p: bool = False

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.perturb_layers = tuple(self.perturb_layers)
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.inner_lr >= 0, "inner_lr", "must be >= 0")
        need(self.outer_lr > 0, "outer_lr", "must be > 0")
        need(self.optimizer in ("sgd", "adam"), "optimizer", "must be sgd or adam")
        need(self.mc_samples >= 1, "mc_samples", "must be >= 1")
        need(self.beta >= 0, "beta", "must be >= 0")
        need(self.adv_steps >= 0, "adv_steps", "must be >= 0")
        need(self.adv_lr > 0, "adv_lr", "must be > 0")
        need(0 < self.rho < 1, "rho", "must lie in (0, 1)")
        need(self.kl_weight >= 0, "kl_weight", "must be >= 0")
        need(self.grad_clip >= 0, "grad_clip", "must be >= 0 (0 disables clipping)")
        need(self.iterations >= 0, "iterations", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(self.meta_grad in ("first_order", "exact"), "meta_grad", "must be first_order or exact")
        need(self.tau_mode in ("relaxed", "hard"), "tau_mode", "must be relaxed or hard")
        need(len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden), "hidden", "need at least one positive width")
        need(
            len(self.perturb_layers) >= 1 and all(0 <= l < len(self.hidden) for l in self.perturb_layers),
            "perturb_layers",
            "must name hidden layers",
        )
        need(self.aux_hidden >= 1, "aux_hidden", "must be >= 1")
        need(self.floor > 0, "floor", "must be > 0")
        need(self.fixed_lambda is None or 0 <= self.fixed_lambda <= 1, "fixed_lambda", "must lie in [0, 1]")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        for family in (PERTURB_FLAGS, MIXUP_FLAGS, STRATEGY_FLAGS):
            on = [f for f in family if getattr(self, f)]
            need(len(on) <= 1, on[0] if on else "", f"mutually exclusive flags: {', '.join(on)}")

    @property
    def perturb_mode(self) -> str:
        return {
            "random_gaussian": "random_gaussian",
            "deterministic_perturbation": "deterministic",
            "random_mu": "random_mu",
            "random_sigma": "random_sigma",
        }.get(next((f for f in PERTURB_FLAGS if getattr(self, f)), ""), "learned")

    @property
    def mixup_mode(self) -> str:
        if self.no_mixup:
            return "none"
        return "random" if self.random_mixup else "learned"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["perturb_layers"] = list(self.perturb_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        return cls(**d)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def coerce(key: str, raw: str, annotation: str | None = None) -> Any:
    """Turn the text of a config value into the type the field expects."""
    ann = annotation if annotation is not None else str(_FIELDS[key].type)
    text = raw.strip()
    try:
        if ann == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if ann == "int":
            return int(text)
        if ann == "float":
            return float(text)
        if ann == "float | None":
            return None if text.lower() in ("none", "") else float(text)
        if ann.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ann}") from None


def parse_config_text(text: str, source: str = "<config>", extra_keys: dict[str, str] | None = None) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``extra_keys`` maps additional accepted keys to their type annotation.
    Errors carry ``source:line``.
    """
    extra_keys = extra_keys or {}
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in body.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS and key not in extra_keys:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = coerce(key, value, extra_keys.get(key))
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def config_key_lines(text: str) -> dict[str, int]:
    """Line number of the last assignment of each key in config text."""
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        if "=" in body:
            lines[body.split("=", 1)[0].strip().replace("-", "_")] = lineno
    return lines


def format_config(values: dict[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = "none"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"

"""Shared desk-scale protocols: the rotated-moons suite and ablation cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bench import DomainDataset, average_accuracy, erm_train, evaluate, gen_two_moons
from .config import MIXUP_FLAGS, PERTURB_FLAGS, STRATEGY_FLAGS, TrainConfig
from .meta import train

ABLATION_FAMILIES = {
    "perturbation": PERTURB_FLAGS,
    "mixup": MIXUP_FLAGS,
    "training": STRATEGY_FLAGS,
}

UNSEEN_ANGLES = (30.0, 60.0)

# Settings for the rotated-moons protocol, shared by ERM and every variant.
BENCHMARK = {"optimizer": "adam", "outer_lr": 0.01, "iterations": 500}

# Settings for the corrupted-glyph uncertainty protocol.
GLYPH_BENCHMARK = {"iterations": 300}


@dataclass
class RotationSuite:
    source: DomainDataset
    targets: list[DomainDataset]


def rotation_suite(
    seed: int,
    n_source: int = 400,
    n_target: int = 2000,
    noise: float = 0.1,
    angles=UNSEEN_ANGLES,
) -> RotationSuite:
    """Source moons at 0 degrees and one held-out set per unseen angle.

    Source and targets use disjoint seed ranges so no target point is a
    rotated copy of a training point.
    """
    source = gen_two_moons(n_source, 0.0, noise, seed=100 + seed)
    targets = []
    for angle in angles:
        t = gen_two_moons(n_target, angle, noise, seed=900 + seed)
        t.domain_id = f"moons_rot{angle:g}"
        targets.append(t)
    return RotationSuite(source, targets)


def fit(cfg: TrainConfig, source: DomainDataset, method: str = "udg"):
    if method == "erm":
        return erm_train(cfg, source)[0]
    if method == "udg":
        return train(cfg, source)[0].model.backbone
    raise ValueError(f"unknown method {method!r}")


def unseen_accuracy(backbone, suite: RotationSuite) -> float:
    return average_accuracy(evaluate(backbone, t) for t in suite.targets)


def variant_config(base: TrainConfig, family: str, flag: str | None) -> TrainConfig:
    """``base`` with the family's flags cleared and ``flag`` (if any) set."""
    if family not in ABLATION_FAMILIES:
        raise ValueError(f"unknown ablation family {family!r} (choose from {', '.join(ABLATION_FAMILIES)})")
    changes = {f: False for f in ABLATION_FAMILIES[family]}
    if flag is not None:
        changes[flag] = True
    return base.replace(**changes)


def ablation_table(base: TrainConfig, family: str, seeds: int, suite_kwargs: dict | None = None) -> dict[str, list[float]]:
    """Unseen-average accuracy of the full model and each variant, per seed.

    Every variant sees the same source data, targets and seed as the full
    model within a seed group.
    """
    suite_kwargs = suite_kwargs or {}
    variants = [None, *ABLATION_FAMILIES[family]] if family in ABLATION_FAMILIES else [None]
    rows: dict[str, list[float]] = {("full" if v is None else v): [] for v in variants}
    for s in range(seeds):
        suite = rotation_suite(base.seed + s, **suite_kwargs)
        for v in variants:
            cfg = variant_config(base, family, v).replace(seed=base.seed + s)
            rows["full" if v is None else v].append(unseen_accuracy(fit(cfg, suite.source), suite))
    return rows


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())

"""One-pass domain uncertainty from the learned perturbation scale.

A target domain whose features push the perturbation net towards a very
different sigma than the source did is treated as more uncertain. The score
needs one forward pass; the Monte-Carlo predictive-variance baseline below
needs ``samples`` of them and exists only as a comparison oracle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import autograd as ag
from .augment import perturb_features
from .bench import DomainDataset
from .model import Backbone, PerturbNet, forward_with_features, infer_gaussian
from .rng import Rng

BAYES_SAMPLES = 30


def _batches(n: int, batch_size: int | None):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def sigma_statistic(pnet: PerturbNet, backbone: Backbone, dataset: DomainDataset, batch_size: int | None = None) -> float:
    """Mean sigma at the first perturbed layer, over batches and dimensions.

    ``batch_size=None`` scores the whole set as one batch, which makes the
    result independent of example order.
    """
    if len(dataset) == 0:
        raise ValueError("sigma_statistic: empty dataset")
    layer = backbone.perturb_layers[0]
    per_batch = []
    with ag.no_grad():
        for idx in _batches(len(dataset), batch_size):
            feats = forward_with_features(backbone, dataset.inputs[idx])[2]
            _, sigma = infer_gaussian(pnet, feats[layer], layer)
            per_batch.append(sigma.data.mean())
    return float(np.mean(per_batch))


def domain_uncertainty_score(sigma_t: float, sigma_s: float) -> float:
    if not sigma_s > 0:
        raise ValueError(f"source sigma must be > 0, got {sigma_s}")
    return abs((sigma_t - sigma_s) / sigma_s)


def bayes_predictive_variance(
    pnet: PerturbNet,
    backbone: Backbone,
    dataset: DomainDataset,
    samples: int = BAYES_SAMPLES,
    seed: int = 0,
) -> float:
    """Predictive variance of the softmax over repeated perturbation draws.

    Each draw perturbs every perturbed layer with fresh noise from the
    domain's own ``(mu, sigma)``; the variance is taken per example and class
    across draws, then averaged.
    """
    if len(dataset) == 0:
        raise ValueError("bayes_predictive_variance: empty dataset")
    if samples < 2:
        raise ValueError("need at least two samples for a variance")
    rng = Rng(seed).fork("bayes")
    probs = []
    with ag.no_grad():
        for k in range(samples):
            krng = rng.fork("sample", k)

            def hook(layer, h, krng=krng):
                mu, sigma = infer_gaussian(pnet, h, layer)
                return perturb_features(h, mu, sigma, krng.fork("eps", layer))[0]

            logits = forward_with_features(backbone, dataset.inputs, hook=hook)[0]
            probs.append(ag.softmax(logits).data)
    return float(np.var(np.stack(probs), axis=0).mean())


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


@dataclass
class UncertaintyReport:
    sigma_source: float
    sigma_target: float
    score: float
    breakdown: list[dict] = field(default_factory=list)
    bayes: dict | None = None

    def to_json(self) -> str:
        doc = asdict(self)
        if doc["bayes"] is None:
            del doc["bayes"]
        return json.dumps(doc, sort_keys=True, indent=1)


def score_domains(
    pnet: PerturbNet,
    backbone: Backbone,
    source: DomainDataset,
    targets: list[DomainDataset],
    batch_size: int | None = None,
    oracle_bayes: bool = False,
    seed: int = 0,
) -> UncertaintyReport:
    """Score each target against ``source``.

    The headline ``sigma_target`` and ``score`` pool every target example;
    ``breakdown`` has one row per target, ordered by shift severity when the
    targets carry one. With ``oracle_bayes`` each row also gets the
    predictive-variance baseline, and the report their rank correlation.
    """
    if not targets:
        raise ValueError("no target datasets to score")
    sigma_s = sigma_statistic(pnet, backbone, source, batch_size)
    order = sorted(range(len(targets)), key=lambda i: (targets[i].shift.severity if targets[i].shift else 0, i))
    rows = []
    for i in order:
        t = targets[i]
        sigma_t = sigma_statistic(pnet, backbone, t, batch_size)
        row = {
            "domain_id": t.domain_id,
            "family": t.shift.family if t.shift else "",
            "severity": t.shift.severity if t.shift else 0,
            "n": len(t),
            "sigma_target": sigma_t,
            "score": domain_uncertainty_score(sigma_t, sigma_s),
        }
        if oracle_bayes:
            row["bayes_variance"] = bayes_predictive_variance(pnet, backbone, t, seed=seed)
        rows.append(row)
    pooled = targets[0] if len(targets) == 1 else DomainDataset(
        np.concatenate([t.inputs for t in targets]),
        np.concatenate([t.labels for t in targets]),
        targets[0].classes,
        "pooled",
    )
    sigma_t = sigma_statistic(pnet, backbone, pooled, batch_size)
    bayes = None
    if oracle_bayes:
        bayes = {"samples": BAYES_SAMPLES, "spearman": spearman([r["score"] for r in rows], [r["bayes_variance"] for r in rows]) if len(rows) > 1 else None}
    return UncertaintyReport(sigma_s, sigma_t, domain_uncertainty_score(sigma_t, sigma_s), rows, bayes)

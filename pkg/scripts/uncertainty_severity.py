"""Domain-uncertainty score against corruption severity on glyphs.

Trains once on clean glyphs, then scores every corruption family at
severities 1..5 (plus the clean set). With ``--bayes`` each family also
gets the 30-draw predictive-variance oracle and the rank correlation
between the two.
"""

import argparse
import time

from udg.bench import FAMILIES, ShiftSpec, evaluate, gen_glyphs
from udg.config import TrainConfig
from udg.experiments import GLYPH_BENCHMARK
from udg.meta import train
from udg.uncertainty import bayes_predictive_variance, domain_uncertainty_score, sigma_statistic, spearman


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    ap.add_argument("--bayes", action="store_true")
    args = ap.parse_args(argv)

    source = gen_glyphs(args.n, seed=70 + args.seed)
    model = train(TrainConfig(**{**GLYPH_BENCHMARK, "seed": args.seed}), source)[0].model
    sigma_s = sigma_statistic(model.pnet, model.backbone, source)
    print("family,severity,accuracy,sigma,score" + (",bayes_variance" if args.bayes else ""))
    for family in args.families:
        sets = [gen_glyphs(args.n, seed=71 + args.seed)]
        sets += [gen_glyphs(args.n, ShiftSpec(family, s), seed=71 + args.seed) for s in range(1, 6)]
        scores, bayes = [], []
        for severity, ds in enumerate(sets):
            sigma_t = sigma_statistic(model.pnet, model.backbone, ds)
            scores.append(domain_uncertainty_score(sigma_t, sigma_s))
            row = f"{family},{severity},{evaluate(model.backbone, ds).accuracy:.4f},{sigma_t:.6f},{scores[-1]:.6e}"
            if args.bayes:
                bayes.append(bayes_predictive_variance(model.pnet, model.backbone, ds, seed=args.seed))
                row += f",{bayes[-1]:.6e}"
            print(row, flush=True)
        if args.bayes:
            print(f"# {family}: spearman(score, bayes) = {spearman(scores, bayes):.3f}")

    # one-pass versus 30-draw timing on a single target
    target = gen_glyphs(args.n, ShiftSpec("noise", 3), seed=71 + args.seed)
    start = time.perf_counter()
    sigma_statistic(model.pnet, model.backbone, target)
    one = time.perf_counter() - start
    start = time.perf_counter()
    bayes_predictive_variance(model.pnet, model.backbone, target)
    many = time.perf_counter() - start
    print(f"# one-pass {1000 * one:.1f} ms, 30-draw oracle {1000 * many:.1f} ms ({many / one:.0f}x)")


if __name__ == "__main__":
    main()

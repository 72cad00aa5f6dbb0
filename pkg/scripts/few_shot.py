"""Few-shot fine-tuning on rotated moons.

Trains the full method on the 0 degree source, then fine-tunes the backbone
on ``--shots`` labelled examples per class from each target angle.
"""

import argparse

import numpy as np

from udg.bench import evaluate, gen_two_moons
from udg.config import TrainConfig
from udg.experiments import BENCHMARK, fit, rotation_suite
from udg.meta import few_shot_adapt


def shots_from(pool, k):
    return pool.subset(np.concatenate([np.flatnonzero(pool.labels == c)[:k] for c in range(pool.classes)]))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--shots", type=int, default=10)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--angles", nargs="+", type=float, default=[30.0, 60.0])
    args = ap.parse_args(argv)

    print("seed,angle,zero_shot,few_shot")
    for seed in range(args.seeds):
        suite = rotation_suite(seed, angles=args.angles)
        bb = fit(TrainConfig(**{**BENCHMARK, "seed": seed}), suite.source)
        for angle, target in zip(args.angles, suite.targets):
            pool = gen_two_moons(200, angle, 0.1, seed=800 + seed)
            tuned = few_shot_adapt(bb, shots_from(pool, args.shots), args.steps, args.lr)
            print(f"{seed},{angle:g},{evaluate(bb, target).accuracy:.4f},{evaluate(tuned, target).accuracy:.4f}", flush=True)


if __name__ == "__main__":
    main()

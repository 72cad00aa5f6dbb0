"""Every ablation family on the rotated-moons protocol.

Same table as ``udg ablate`` but for all three families in one go.

    python3 scripts/ablations.py --seeds 5
"""

import argparse

from udg.config import TrainConfig
from udg.experiments import ABLATION_FAMILIES, BENCHMARK, ablation_table, mean_std


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--families", nargs="+", default=list(ABLATION_FAMILIES), choices=list(ABLATION_FAMILIES))
    args = ap.parse_args(argv)

    base = TrainConfig(**BENCHMARK)
    for family in args.families:
        rows = ablation_table(base, family, args.seeds)
        print(f"# {family}")
        print("variant,mean,std," + ",".join(f"seed{s}" for s in range(args.seeds)))
        for name, accs in rows.items():
            m, s = mean_std(accs)
            print(f"{name},{m:.4f},{s:.4f}," + ",".join(f"{a:.4f}" for a in accs), flush=True)
        print()


if __name__ == "__main__":
    main()

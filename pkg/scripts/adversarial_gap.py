"""Discriminator gap before and after training, full model against the no_adv ablation.

Reports the stage discriminator's |mean D(source) - mean D(target)| at
initialization, after the last epoch and on the restored checkpoint, plus the
gap seen by a freshly fitted probe discriminator.

    python scripts/adversarial_gap.py --seeds 10 --lam 0.5
"""

import argparse
from dataclasses import replace

from argf.data import SyntheticSpec, generate_synthetic
from argf.harness import ArgfModel, RunConfig, gap_run, probe_gap


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--separation", type=float, default=1.25)
    p.add_argument("--probe", action="store_true", help="also fit a probe discriminator (slower)")
    args = p.parse_args()

    shrank = {"full": 0, "no_adv": 0}
    for seed in range(args.seeds):
        bundle = generate_synthetic(SyntheticSpec(num_classes=2, dim=16, separation=args.separation, seed=seed))
        base = RunConfig(k=args.k, lam=args.lam, epochs=args.epochs, patience=args.patience, seed=seed)
        for name, config in (("full", base), ("no_adv", replace(base, no_adv=True))):
            r = gap_run(config, bundle)
            shrank[name] += r.shrank
            line = (f"seed {seed} {name:<7} init {r.initial:.4f}  last {r.final:.4f}  "
                    f"restored {r.restored:.4f}  epochs {len(r.report.history)}  acc {r.report.test.accuracy:.4f}")
            if args.probe:
                before = probe_gap(ArgfModel(config, bundle.dim, bundle.num_classes), bundle)
                after = probe_gap(r.model, bundle)
                line += f"  probe {before:.3f} -> {after:.3f}"
            print(line, flush=True)
    print(f"gap shrank: full {shrank['full']}/{args.seeds}, no_adv {shrank['no_adv']}/{args.seeds}")


if __name__ == "__main__":
    main()

"""Pre/post-update gap curves for None vs MetaMix on the classification pool.

Writes one CSV row per (strategy, seed, eval step) with the meta-test
pre-update and post-update accuracy and the median capacity quantity gamma.

    python3 scripts/overfitting_probe.py --seeds 0 1 2 3 4 --out runs/probe.csv
"""

import argparse
import csv
import sys
from pathlib import Path

from metamix import config
from metamix.experiment import train

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "nme_metamix.txt"))
    ap.add_argument("--strategies", nargs="+", default=["None", "MetaMix"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--out", default="runs/overfitting_probe.csv")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "step", "test_pre", "test_post", "test_gap", "gamma_median"])
        for strategy in args.strategies:
            for seed in args.seeds:
                cfg = config.load(args.config, [f"augment.strategy={strategy}", f"run.seed={seed}",
                                                f"run.eval_every={args.eval_every}", "run.track_gamma=true"])
                for r in train(cfg).evals:
                    w.writerow([strategy, seed, r["step"], r["test_pre"], r["test_post"], r["test_gap"],
                                r["gamma_median"]])
                    print(f"{strategy:8s} seed={seed} step={r['step']:5d} pre={r['test_pre']:.3f} "
                          f"post={r['test_post']:.3f} gap={r['test_gap']:.3f} gamma={r['gamma_median']:.2f}",
                          flush=True)
    print(f"wrote {out}")


if __name__ == "__main__":
    sys.exit(main())

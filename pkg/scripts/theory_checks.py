"""Print the mixup and channel-shuffle regularizer reports with extra diagnostics.

For each mixup instance the report shows the literal Monte-Carlo mixed loss,
its closed-form expectation, the quadratic prediction L(Z) + c phi^T Sigma phi
and the reweighted-form Monte-Carlo estimate the prediction corresponds to.

    python3 scripts/theory_checks.py --mc-samples 1000000
"""

import argparse
import sys

from metamix.theory import verify_lemma1, verify_theorem2


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=10)
    ap.add_argument("--mc-samples", type=int, default=10**6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    failed = 0
    for form in ("exact", "paper"):
        print(f"== channel shuffle, {form} form ==")
        for r in verify_theorem2(args.instances, mc_samples=args.mc_samples, seed=args.seed, form=form):
            print("\n".join(r.lines()))
            failed += form == "exact" and not r.passed
    print("== mixup ==")
    for r in verify_lemma1(args.instances, mc_samples=args.mc_samples, seed=args.seed):
        print("\n".join(r.lines()))
        failed += not r.passed
    print(f"{failed} check(s) outside tolerance")
    return 0 if failed == 0 else 3


if __name__ == "__main__":
    sys.exit(main())

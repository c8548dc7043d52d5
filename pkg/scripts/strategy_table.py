"""Ablation table over augmentation strategies and seeds.

    python3 scripts/strategy_table.py --strategies None MetaMix MixSS MixQQ MixCob
"""

import argparse
import sys
from pathlib import Path

from metamix import config
from metamix.experiment import ablation_table, run_ablation

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "nme_metamix.txt"))
    ap.add_argument("--strategies", nargs="+",
                    default=["None", "MetaMix", "MixSS", "MixQQ", "MixCob", "Concat", "SetShuffle", "MetaAug",
                             "MixAll", "ChannelShuffle", "MMCF"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--override", action="append", default=[])
    ap.add_argument("--out", default="runs/strategy_table.csv")
    args = ap.parse_args(argv)

    cfg = config.load(args.config, args.override + ["run.eval_every=100000"])
    rows = run_ablation(cfg, args.strategies, args.seeds, on_row=lambda r: print(
        f"{r.strategy:14s} seed={r.seed} pre={r.pre:.4f} post={r.post:.4f} gap={r.gap:.4f}", flush=True))
    table = ablation_table(rows, higher_better=cfg.pool.kind != "sinusoid", reference="None")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    print(table, end="")


if __name__ == "__main__":
    sys.exit(main())

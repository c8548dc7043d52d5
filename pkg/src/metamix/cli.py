"""Command-line front-end: ``metamix {train,eval,verify,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 tolerance breach, 4 divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from .autodiff import GradientError
from .meta import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_TOLERANCE, EXIT_DIVERGENCE = 0, 2, 3, 4


def _load_config(args) -> cfgmod.ExperimentConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"run.out={args.out}")
    if args.config:
        return cfgmod.load(args.config, overrides)
    return cfgmod.parse("", overrides)


def cmd_train(args) -> int:
    from .experiment import train, write_artifacts

    cfg = _load_config(args)
    out = Path(cfg.run.out)
    print(cfgmod.serialize(cfg), end="")
    result = train(cfg)
    write_artifacts(result, out)
    fe = result.final_eval
    if fe is not None:
        print(f"final: test pre {fe['test_pre']:.4f} post {fe['test_post']:.4f} gap {fe['test_gap']:.4f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import build_model, build_pool, eval_csv, evaluate
    from .model import load_params

    cfg = _load_config(args)
    pool = build_pool(cfg)
    model = build_model(cfg, pool)
    theta = load_params(args.checkpoint)
    try:
        theta.check_shapes(model)
    except ValueError as exc:
        raise cfgmod.ConfigError(f"checkpoint {args.checkpoint} does not match the model: {exc}") from None
    summary = evaluate(cfg, model, pool, theta, args.split or cfg.run.eval_split)
    text = eval_csv(summary)
    out = Path(args.out or cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(text, encoding="utf-8")
    print(text.splitlines()[-1])
    return EXIT_OK


def _emit(lines):
    for line in lines:
        print(line)


def cmd_verify(args) -> int:
    from . import checks, theory

    ok = True
    which = args.which
    if which in ("gradcheck", "all"):
        res = checks.gradient_checks(args.seed or 0)
        _emit(r.line() for r in res)
        ok &= all(r.passed for r in res)
    if which in ("beta", "all"):
        res = checks.beta_checks(args.seed or 0)
        _emit(r.line() for r in res)
        ok &= all(r.passed for r in res)
    if which in ("lemma1", "all"):
        alpha, beta = args.alpha, args.beta
        eps = args.eps_clamp
        if eps is None:
            if min(alpha, beta) <= 1.0:
                raise cfgmod.ConfigError(
                    f"the mixup constant diverges for min(alpha, beta) = {min(alpha, beta)} <= 1; "
                    "rerun with an explicit --eps-clamp"
                )
            eps = 1e-6
        reports = theory.verify_lemma1(args.instances, alpha, beta, args.mc_samples, eps, args.seed or 0)
        for r in reports:
            _emit(r.lines())
        ok &= all(r.passed for r in reports)
    if which in ("theorem2", "all"):
        reports = theory.verify_theorem2(args.instances, tuple(args.deltas), args.mc_samples, args.seed or 0, args.form)
        for r in reports:
            _emit(r.lines())
        ok &= all(r.passed for r in reports)
    print("verify:", "all checks passed" if ok else "tolerance breach")
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_ablate(args) -> int:
    from .experiment import ablation_table, run_ablation

    cfg = _load_config(args)
    seeds = args.seeds or [cfg.run.seed]
    higher = cfg.pool.kind != "sinusoid"
    rows = run_ablation(cfg, args.strategies, seeds, on_row=lambda r: print(
        f"{r.strategy} seed={r.seed} pre={r.pre:.4f} post={r.post:.4f} gap={r.gap:.4f}", flush=True))
    table = ablation_table(rows, higher_better=higher, reference=args.strategies[0])
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metamix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        if out:
            p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable config override")

    p = sub.add_parser("train", help="meta-train one run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="meta-test a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run numerical self-checks")
    p.add_argument("which", choices=("lemma1", "theorem2", "beta", "gradcheck", "all"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--eps-clamp", type=float, default=None)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--mc-samples", type=int, default=10**6)
    p.add_argument("--deltas", type=float, nargs="+", default=[0.6, 0.8, 0.95])
    p.add_argument("--form", choices=("exact", "paper"), default="exact")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train one run per strategy and seed")
    common(p)
    p.add_argument("--strategies", nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except GradientError as exc:
        print(f"diverged (non-finite value): {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())

"""Seeded training runs, ablations and their on-disk artifacts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import Strategy
from .config import ExperimentConfig, serialize
from .meta import EvalSummary, adapted_heads, make_optimizer, meta_test, outer_step
from .model import MetaModel, ParamSet
from .tasks import TaskPool, load_csv_tasks, make_ambiguous_regression_pool, make_nme_classification_pool, sample_task
from .theory import track_capacity

# named sub-streams of the master seed; toggling augmentation never touches task sampling
STREAMS = {"pool": 0, "tasks": 1, "init": 2, "augment": 3, "shuffle": 4, "eval": 5, "mc": 6, "gamma": 7}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


def build_pool(cfg: ExperimentConfig) -> TaskPool:
    p = cfg.pool
    seed = p.seed if p.seed >= 0 else int(stream(cfg.run.seed, "pool").integers(2**31))
    if p.kind == "nme":
        return make_nme_classification_pool(
            p.n_sets, p.classes_per_set, p.dim, p.n_T, seed,
            samples_per_class=p.samples_per_class, center_scale=p.center_scale, within_sd=p.within_sd,
            n_eval_tasks=p.n_eval_pool, mutually_exclusive=p.mutually_exclusive,
        )
    if p.kind == "sinusoid":
        return make_ambiguous_regression_pool(
            p.n_T, p.input_dim, p.noise_sd, seed, samples_per_task=p.samples_per_task, n_eval_tasks=p.n_eval_pool,
        )
    pool = load_csv_tasks(p.csv_path, "train")
    if p.csv_eval_path:
        ev = load_csv_tasks(p.csv_eval_path, "test")
        pool.splits["test"] = ev.splits["test"]
        pool.splits["val"] = ev.splits["test"]
    else:
        pool.splits["val"] = pool.splits["test"] = pool.splits["train"]
    return pool


def build_model(cfg: ExperimentConfig, pool: TaskPool) -> MetaModel:
    dims = (pool.dim, *cfg.model.hidden, pool.out_dim)
    kind = "softmax_ce" if pool.kind == "classification" else "mse"
    return MetaModel(dims, cfg.model.activation, cfg.model.slope, kind)


def init_theta(cfg: ExperimentConfig, model: MetaModel) -> ParamSet:
    v = cfg.meta.variant
    seed = int(stream(cfg.run.seed, "init").integers(2**31))
    return model.init_params(seed, head_only=v == "ANIL", metasgd_lr=cfg.meta.metasgd_lr if v == "MetaSGD" else None)


def _shots(pool: TaskPool, cfg: ExperimentConfig):
    if any(src.fixed_split is not None for src in pool.splits.get("train", [])):
        return None, None
    return cfg.meta.k_support, cfg.meta.k_query


def higher_is_better(model: MetaModel) -> bool:
    return model.loss_kind == "softmax_ce"


@dataclass
class TrainResult:
    config: ExperimentConfig
    model: MetaModel
    pool: TaskPool
    theta: ParamSet
    best_theta: ParamSet
    best_step: int
    records: list[dict] = field(default_factory=list)

    @property
    def evals(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "eval"]

    @property
    def final_eval(self) -> dict | None:
        ev = self.evals
        return ev[-1] if ev else None


def evaluate(cfg: ExperimentConfig, model: MetaModel, pool: TaskPool, theta: ParamSet, split: str) -> EvalSummary:
    """Meta-test on a split; the task draw is the same on every call for a given seed."""
    ks, kq = _shots(pool, cfg)
    n = cfg.run.n_eval_tasks
    if ks is None:
        n = min(n, pool.n_tasks(split))
    rng = np.random.default_rng([int(cfg.run.seed), STREAMS["eval"], 0 if split == "val" else 1])
    return meta_test(model, theta, pool, cfg.hyper(), n, rng, split, ks, kq)


def _eval_record(step: int, val: EvalSummary, test: EvalSummary, cap=None) -> dict:
    rec = {
        "kind": "eval",
        "step": step,
        "val_pre": val.pre,
        "val_post": val.post,
        "test_pre": test.pre,
        "test_post": test.post,
        "test_gap": test.gap,
        "test_ci": test.ci("post")[1],
    }
    if test.metric == "mse" and all(t.r2_post is not None for t in test.tasks):
        mean, med, over = test.r2_summary("post")
        rec.update(test_r2_mean=mean, test_r2_median=med, test_r2_over_0_3=over)
    if cap is not None:
        rec.update(gamma_median=cap.median_gamma, rank_median=float(np.median(cap.ranks)),
                   b_proxy_median=float(np.median(cap.b_proxies)))
    return rec


def train(cfg: ExperimentConfig, on_record=None) -> TrainResult:
    """Run the fixed outer-step budget with periodic evaluation and best-on-validation selection."""
    cfg.validate()
    pool = build_pool(cfg)
    model = build_model(cfg, pool)
    theta = init_theta(cfg, model)
    hyper = cfg.hyper()
    spec = cfg.augment_spec()
    ks, kq = _shots(pool, cfg)
    task_rng = stream(cfg.run.seed, "tasks")
    aug_rng = stream(cfg.run.seed, "augment")
    shuffle_rng = stream(cfg.run.seed, "shuffle")
    optimizer = make_optimizer(hyper)
    better = higher_is_better(model)

    gamma_tasks = None
    if cfg.run.track_gamma:
        grng = stream(cfg.run.seed, "gamma")
        gamma_tasks = [sample_task(pool, cfg.run.eval_split, ks, kq, grng) for _ in range(cfg.run.gamma_tasks)]

    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    best, best_step, best_score = theta.copy(), 0, None
    for step in range(1, cfg.run.budget + 1):
        tasks = [sample_task(pool, "train", ks, kq, task_rng) for _ in range(hyper.task_batch)]
        theta, rec = outer_step(model, theta, tasks, spec, hyper, aug_rng, optimizer, shuffle_rng, step)
        emit(rec.to_dict())
        if step % cfg.run.eval_every == 0 or step == cfg.run.budget:
            val = evaluate(cfg, model, pool, theta, "val")
            test = evaluate(cfg, model, pool, theta, cfg.run.eval_split)
            cap = None
            if gamma_tasks is not None:
                cap = track_capacity(model, adapted_heads(model, theta, gamma_tasks, hyper), gamma_tasks)
            emit(_eval_record(step, val, test, cap))
            score = val.post if better else -val.post
            if best_score is None or score > best_score:
                best, best_step, best_score = theta.copy(), step, score
    return TrainResult(cfg, model, pool, theta, best, best_step, records)


# ---------------------------------------------------------------------------
# artifacts

SUMMARY_FIELDS = ("step", "val_pre", "val_post", "test_pre", "test_post", "test_gap", "test_ci")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(result: TrainResult) -> str:
    evals = result.evals
    extra = sorted({k for r in evals for k in r} - set(SUMMARY_FIELDS) - {"kind"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SUMMARY_FIELDS) + extra)
    for r in evals:
        w.writerow([_fmt(r.get(k, "")) for k in list(SUMMARY_FIELDS) + extra])
    return buf.getvalue()


def write_artifacts(result: TrainResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize(result.config), encoding="utf-8")
    with open(out / "trainlog.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "summary.csv").write_text(summary_csv(result), encoding="utf-8")
    result.theta.save(out / "final.ckpt")
    result.best_theta.save(out / "best.ckpt")


def eval_csv(summary: EvalSummary) -> str:
    """Per-task rows followed by one aggregate row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if summary.metric == "mse":
        w.writerow(["task_id", "n_query", "mse_pre", "mse_post", "r2_pre", "r2_post"])
        for t in summary.tasks:
            w.writerow([t.task_id, t.n_query, _fmt(t.pre), _fmt(t.post), _fmt(t.r2_pre), _fmt(t.r2_post)])
        mean, med, over = summary.r2_summary("post")
        w.writerow(["aggregate", sum(t.n_query for t in summary.tasks), _fmt(summary.pre), _fmt(summary.post),
                    f"mean={mean!r};median={med!r}", f"over_0.3={over}"])
    else:
        w.writerow(["task_id", "n_query", "acc_pre", "acc_post"])
        for t in summary.tasks:
            w.writerow([t.task_id, t.n_query, _fmt(t.pre), _fmt(t.post)])
        mean, half = summary.ci("post")
        w.writerow(["aggregate", sum(t.n_query for t in summary.tasks), _fmt(summary.pre), f"{mean!r}+-{half!r}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    strategy: str
    seed: int
    pre: float
    post: float
    gap: float
    ci: float
    gamma: float | None = None


def run_ablation(cfg: ExperimentConfig, strategies: list[str], seeds: list[int], on_row=None) -> list[AblationRow]:
    from .config import ConfigError

    for strategy in strategies:
        try:
            Strategy.parse(strategy)
        except ValueError as exc:
            raise ConfigError(str(exc), "strategies") from None
    rows = []
    for strategy in strategies:
        for seed in seeds:
            c = replace(cfg, augment=replace(cfg.augment, strategy=strategy), run=replace(cfg.run, seed=seed))
            res = train(c)
            fe = res.final_eval
            row = AblationRow(strategy, seed, fe["test_pre"], fe["test_post"], fe["test_gap"], fe["test_ci"],
                              fe.get("gamma_median"))
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def sign_test(wins: int, n: int) -> float:
    """One-sided binomial sign-test p-value for at least ``wins`` successes out of ``n``."""
    from math import comb

    return sum(comb(n, k) for k in range(wins, n + 1)) / 2**n


def ablation_table(rows: list[AblationRow], higher_better: bool = True, reference: str = "None") -> str:
    """Per-(strategy, seed) rows, per-strategy mean rows, and sign tests against ``reference``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "seed", "pre", "post", "gap", "ci", "gamma"])
    for r in rows:
        w.writerow([r.strategy, r.seed, _fmt(r.pre), _fmt(r.post), _fmt(r.gap), _fmt(r.ci),
                    "" if r.gamma is None else _fmt(r.gamma)])
    strategies = list(dict.fromkeys(r.strategy for r in rows))
    for s in strategies:
        sub = [r for r in rows if r.strategy == s]
        gam = [r.gamma for r in sub if r.gamma is not None]
        w.writerow([s, "mean", _fmt(float(np.mean([r.pre for r in sub]))), _fmt(float(np.mean([r.post for r in sub]))),
                    _fmt(float(np.mean([r.gap for r in sub]))), _fmt(float(np.mean([r.ci for r in sub]))),
                    _fmt(float(np.median(gam))) if gam else ""])
    ref = {r.seed: r for r in rows if r.strategy == reference}
    if ref:
        for s in strategies:
            if s == reference:
                continue
            pairs = [(r, ref[r.seed]) for r in rows if r.strategy == s and r.seed in ref]
            if not pairs:
                continue
            wins = sum((a.post > b.post) if higher_better else (a.post < b.post) for a, b in pairs)
            w.writerow([s, f"sign_test_vs_{reference}", f"wins={wins}", f"n={len(pairs)}",
                        _fmt(sign_test(wins, len(pairs))), "", ""])
    return buf.getvalue()

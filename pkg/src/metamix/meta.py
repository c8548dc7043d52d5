"""Inner-loop adaptation, augmented outer-loop updates and meta-testing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .augment import (
    SHUFFLING,
    AugmentSpec,
    Strategy,
    build_outer_batch,
    channel_shuffle,
    ensure_masks,
    plan_task,
)
from .model import MetaModel, ParamSet
from .tasks import Task, TaskPool, sample_task

VARIANTS = ("MAML", "FOMAML", "ANIL", "MetaSGD")


class DivergenceError(RuntimeError):
    """Outer loss left the finite/bounded region."""


@dataclass(frozen=True)
class MetaHyper:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    task_batch: int = 4
    second_order: bool = True
    variant: str = "MAML"
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be positive (outer_lr may be 0)")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.task_batch < 1:
            raise ValueError("task_batch must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    @property
    def uses_second_order(self) -> bool:
        return self.second_order and self.variant != "FOMAML"


# ---------------------------------------------------------------------------
# optimizers over lists of arrays


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(hyper: MetaHyper):
    if hyper.optimizer == "sgd":
        return SGD(hyper.outer_lr)
    return Adam(hyper.outer_lr, hyper.adam_beta1, hyper.adam_beta2, hyper.adam_eps)


# ---------------------------------------------------------------------------
# inner loop


def inner_adapt(model: MetaModel, params: ParamSet, xs, ys, hyper: MetaHyper, build_graph: bool, loss_fn=None) -> ParamSet:
    """Gradient steps on the support loss; only adaptable layers move.

    With ``build_graph`` the returned parameters are graph nodes depending on
    ``params`` (second-order when the variant allows it, first-order
    otherwise). Without it, arrays are returned. ``loss_fn(params)`` replaces
    the default support loss.
    """
    if len(xs) == 0:
        raise ValueError("empty support set")
    if loss_fn is None:
        loss_fn = lambda p: model.loss(model.forward(p, xs), ys)  # noqa: E731
    create = build_graph and hyper.uses_second_order
    phi = params if build_graph else params.as_leaves()
    idx = phi.adapt_indices()
    for step in range(hyper.inner_steps):
        try:
            loss = loss_fn(phi)
            gs = ad.grad(loss, [phi.values[k] for k in idx], build_graph=create)
        except ad.GradientError as exc:
            raise ad.GradientError(f"inner step {step}: {exc}") from exc
        new = list(phi.values)
        for k, g in zip(idx, gs):
            g = g if create else ad.constant(g)
            if phi.rates is None:
                new[k] = ad.sub(new[k], ad.scale(g, hyper.inner_lr))
            else:
                rate = phi.rates[k]
                new[k] = ad.sub(new[k], ad.mul(rate, g) if isinstance(rate, ad.Node) else ad.mul_const(g, rate))
        phi = phi.with_values(new)
        if not build_graph:
            phi = ParamSet([ad.parameter(v.value) for v in phi.values], phi.adaptable, phi.rates)
    if build_graph:
        return phi
    return ParamSet(phi.arrays(), phi.adaptable, params.rate_arrays())


def predict(model: MetaModel, params: ParamSet, x) -> np.ndarray:
    with ad.no_graph():
        return model.forward(params, x).value


def score(model: MetaModel, params: ParamSet, x, y) -> float:
    """Accuracy for classification models, MSE for regression."""
    out = predict(model, params, x)
    if model.loss_kind == "softmax_ce":
        return metrics.accuracy(out, y)
    return metrics.mse(out, y)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class IterationRecord:
    step: int
    outer_loss: float
    pre_train: float
    post_train: float

    def to_dict(self) -> dict:
        return {"kind": "iter", "step": self.step, "outer_loss": self.outer_loss,
                "pre_train": self.pre_train, "post_train": self.post_train}


def task_outer_loss(model, P: ParamSet, plan, spec, hyper, rng, shuffle_rng, batch_pool=None):
    """Adapt on the (possibly augmented) support set and return (outer loss node, adapted params)."""
    t = plan.task
    loss_fn = None
    if spec.strategy in SHUFFLING:
        # the support set is shuffled before adaptation; partners and masks are
        # drawn once on the initialization features and reused every inner step
        l = plan.layer
        masks = ensure_masks(plan, model.width(l), spec.delta, shuffle_rng)
        with ad.no_graph():
            h0 = model.forward_to_layer(P, t.xs, l)
        shuffled = channel_shuffle(h0.value, t.ys, t.class_s, plan.pairing, masks, shuffle_rng)
        loss_fn = _ShuffledSupportLoss(model, t, l, shuffled.partner, shuffled.mask)
    phi = inner_adapt(model, P, t.xs, t.ys, hyper, build_graph=True, loss_fn=loss_fn)
    tap = lambda x, l: model.forward_to_layer(phi, x, l)  # noqa: E731
    batches = build_outer_batch(spec, plan, tap, rng, shuffle_rng, batch_pool)
    total = None
    for b in batches:
        lb = model.loss(model.forward_from_layer(phi, b.h, b.layer), b.y)
        total = lb if total is None else ad.add(total, lb)
    if len(batches) > 1:
        total = ad.scale(total, 1.0 / len(batches))
    return total, phi


class _ShuffledSupportLoss:
    """Support loss on channel-shuffled layer-``l`` features with fixed partners and masks."""

    def __init__(self, model, task, layer, partner, mask):
        self.model, self.task, self.layer = model, task, layer
        self.partner, self.mask = partner, mask

    def __call__(self, p):
        h = self.model.forward_to_layer(p, self.task.xs, self.layer)
        h = ad.add(ad.mul_const(h, self.mask), ad.mul_const(ad.index_rows(h, self.partner), 1.0 - self.mask))
        return self.model.loss(self.model.forward_from_layer(p, h, self.layer), self.task.ys)


def outer_step(
    model: MetaModel,
    theta: ParamSet,
    tasks: list[Task],
    spec: AugmentSpec,
    hyper: MetaHyper,
    rng: np.random.Generator,
    optimizer=None,
    shuffle_rng: np.random.Generator | None = None,
    step: int = 0,
) -> tuple[ParamSet, IterationRecord]:
    """One meta-update of ``theta`` from a batch of tasks."""
    if not tasks:
        raise ValueError("need at least one task")
    if shuffle_rng is None:
        shuffle_rng = rng
    if optimizer is None:
        optimizer = SGD(hyper.outer_lr)
    P = theta.as_leaves()
    batch_pool = None
    if spec.strategy is Strategy.MIX_ALL:
        batch_pool = (
            np.concatenate([np.concatenate([t.xs, t.xq]) for t in tasks]),
            np.concatenate([np.concatenate([t.ys, t.yq]) for t in tasks]),
        )
    total = None
    pre, post = [], []
    for task in tasks:
        plan = plan_task(spec, task, model.n_layers, rng, shuffle_rng)
        loss, phi = task_outer_loss(model, P, plan, spec, hyper, rng, shuffle_rng, batch_pool)
        total = loss if total is None else ad.add(total, loss)
        pre.append(score(model, theta, plan.task.xq, plan.task.yq))
        post.append(score(model, phi, plan.task.xq, plan.task.yq))
    outer = ad.scale(total, 1.0 / len(tasks))
    value = float(outer.value)
    if not np.isfinite(value) or value > hyper.divergence_threshold:
        raise DivergenceError(f"outer loss {value!r} at step {step} exceeds {hyper.divergence_threshold}")

    wrt = list(P.values)
    rate_idx = []
    if P.rates is not None:
        rate_idx = P.adapt_indices()
        wrt += [P.rates[k] for k in rate_idx]
    grads = ad.grad(outer, wrt, allow_unused=True)
    arrays = theta.arrays()
    rates = theta.rate_arrays()
    current = arrays + ([rates[k] for k in rate_idx] if rate_idx else [])
    updated = optimizer.step(current, grads)
    new_values = updated[:len(arrays)]
    new_rates = None
    if rates is not None:
        new_rates = list(rates)
        for k, r in zip(rate_idx, updated[len(arrays):]):
            new_rates[k] = r
    new_theta = ParamSet(new_values, theta.adaptable, new_rates)
    return new_theta, IterationRecord(step, value, float(np.mean(pre)), float(np.mean(post)))


def meta_gradient(model, theta: ParamSet, tasks, spec, hyper, rng, shuffle_rng=None) -> list[np.ndarray]:
    """Gradient of the averaged outer loss with respect to the initialization (no update)."""
    shuffle_rng = rng if shuffle_rng is None else shuffle_rng
    P = theta.as_leaves()
    total = None
    for task in tasks:
        plan = plan_task(spec, task, model.n_layers, rng, shuffle_rng)
        loss, _ = task_outer_loss(model, P, plan, spec, hyper, rng, shuffle_rng)
        total = loss if total is None else ad.add(total, loss)
    return ad.grad(ad.scale(total, 1.0 / len(tasks)), list(P.values), allow_unused=True)


# ---------------------------------------------------------------------------
# meta-testing


@dataclass
class TaskEval:
    task_id: str
    n_query: int
    pre: float
    post: float
    r2_pre: float | None = None
    r2_post: float | None = None


@dataclass
class EvalSummary:
    split: str
    metric: str
    tasks: list[TaskEval] = field(default_factory=list)

    @property
    def pre(self) -> float:
        return float(np.mean([t.pre for t in self.tasks]))

    @property
    def post(self) -> float:
        return float(np.mean([t.post for t in self.tasks]))

    @property
    def gap(self) -> float:
        """Post-update minus pre-update metric."""
        return self.post - self.pre

    def ci(self, which: str = "post") -> tuple[float, float]:
        return metrics.mean_ci95([getattr(t, which) for t in self.tasks])

    def r2_summary(self, which: str = "post") -> tuple[float, float, int]:
        return metrics.summarize_r2([getattr(t, f"r2_{which}") for t in self.tasks])


def meta_test(
    model: MetaModel,
    theta: ParamSet,
    pool: TaskPool,
    hyper: MetaHyper,
    n_tasks: int,
    rng: np.random.Generator,
    split: str = "test",
    k_support: int | None = 5,
    k_query: int | None = 5,
    inner_steps: int | None = None,
) -> EvalSummary:
    """Adapt on each raw support set and score the raw query set, before and after adaptation.

    Query labels are only read by the scoring step.
    """
    if pool.n_tasks(split) == 0:
        raise ValueError(f"split {split!r} is empty")
    if inner_steps is not None and inner_steps != hyper.inner_steps:
        from dataclasses import replace

        hyper = replace(hyper, inner_steps=inner_steps)
    regression = model.loss_kind == "mse"
    summary = EvalSummary(split, "mse" if regression else "accuracy")
    for _ in range(n_tasks):
        task = sample_task(pool, split, k_support, k_query, rng)
        phi = inner_adapt(model, theta, task.xs, task.ys, hyper, build_graph=False)
        pred_pre = predict(model, theta, task.xq)
        pred_post = predict(model, phi, task.xq)
        if regression:
            te = TaskEval(task.task_id, task.k_query, metrics.mse(pred_pre, task.yq), metrics.mse(pred_post, task.yq))
            if task.k_query >= 2:
                te.r2_pre = metrics.r_squared(pred_pre, task.yq)
                te.r2_post = metrics.r_squared(pred_post, task.yq)
        else:
            te = TaskEval(task.task_id, task.k_query, metrics.accuracy(pred_pre, task.yq), metrics.accuracy(pred_post, task.yq))
        summary.tasks.append(te)
    return summary


def adapted_heads(model: MetaModel, theta: ParamSet, tasks: list[Task], hyper: MetaHyper) -> list[ParamSet]:
    return [inner_adapt(model, theta, t.xs, t.ys, hyper, build_graph=False) for t in tasks]

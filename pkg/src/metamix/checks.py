"""Gradient and sampler self-checks shared by the CLI and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .augment import AugmentSpec, sample_beta
from .meta import MetaHyper, meta_gradient
from .model import MetaModel, ParamSet
from .tasks import Task


@dataclass
class CheckResult:
    name: str
    value: float
    bound: float
    passed: bool

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value:.3g} (bound {self.bound:.3g})"


def rel_err(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _primitive_cases(rng):
    """(name, builder(list of leaf nodes) -> scalar node, input arrays)."""
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 5))
    C = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(4, 3))  # fixed weights turn any matrix output into a scalar
    Y = np.eye(3)[rng.integers(3, size=4)] * 0.7 + 0.1
    idx = np.array([2, 0, 0, 3, 1])
    lam = rng.uniform(size=4)
    lse_shape = ad.logsumexp_rows(ad.constant(A)).value.shape
    wsum = lambda z: ad.sum_all(ad.mul_const(z, w))  # noqa: E731
    return [
        ("matmul", lambda a, c: ad.sum_all(ad.mul_const(ad.matmul(a, c), rng_w(4, 5))), [A, B]),
        ("add_bias", lambda a, v: wsum(ad.add_bias(a, v)), [A, b]),
        ("leaky_relu", lambda a: wsum(ad.leaky_relu(a, 0.01)), [_away_from_zero(rng, (4, 3))]),
        ("relu", lambda a: wsum(ad.relu(a)), [_away_from_zero(rng, (4, 3))]),
        ("mul", lambda a, c: wsum(ad.mul(a, c)), [A, C]),
        ("scale", lambda a: wsum(ad.scale(a, -1.7)), [A]),
        ("exp", lambda a: wsum(ad.exp(a)), [A]),
        ("concat_rows", lambda a, c: ad.sum_all(ad.mul_const(ad.concat_rows(a, c), rng_w(8, 3))), [A, C]),
        ("index_rows", lambda a: ad.sum_all(ad.mul_const(ad.index_rows(a, idx), rng_w(5, 3))), [A]),
        ("mix_rows", lambda a, c: wsum(ad.mix_rows(a, c, lam)), [A, C]),
        ("mse", lambda a: ad.mse(a, C), [A]),
        ("softmax_cross_entropy", lambda a: ad.softmax_cross_entropy(a, Y), [A]),
        ("transpose", lambda a: ad.sum_all(ad.mul_const(ad.transpose(a), rng_w(3, 4))), [A]),
        ("logsumexp_rows", lambda a: ad.sum_all(ad.mul_const(ad.logsumexp_rows(a), rng_w(*lse_shape))), [A]),
    ]


_W_RNG = np.random.default_rng(12345)
_W_CACHE: dict = {}


def rng_w(*shape):
    if shape not in _W_CACHE:
        _W_CACHE[shape] = _W_RNG.normal(size=shape)
    return _W_CACHE[shape]


def primitive_checks(seed: int = 0, tol: float = 1e-6, eps: float = 1e-6) -> list[CheckResult]:
    """Every primitive backward rule against central differences."""
    rng = np.random.default_rng(seed)
    out = []
    for name, build, inputs in _primitive_cases(rng):
        leaves = [ad.parameter(x) for x in inputs]
        got = ad.grad(build(*leaves), leaves)
        fd = ad.finite_difference_gradient(lambda xs: build(*[ad.constant(x) for x in xs]).value, inputs, eps)
        e = rel_err(got, fd)
        out.append(CheckResult(f"backward {name}", e, tol, e < tol))
    return out


def second_order_check(seed: int = 0, tol: float = 1e-6, eps: float = 1e-6) -> CheckResult:
    """Gradient of a gradient-norm (double backward) through a small MLP against differences of first gradients."""
    rng = np.random.default_rng(seed)
    model = MetaModel((3, 4, 2), "leaky_relu", loss_kind="softmax_ce")
    theta = model.init_params(seed)
    x = rng.normal(size=(6, 3)) + 0.05
    y = np.eye(2)[rng.integers(2, size=6)]

    def first_grads(arrays):
        P = ParamSet([ad.parameter(a) for a in arrays], theta.adaptable)
        return ad.grad(model.loss(model.forward(P, x), y), P.values)

    P = theta.as_leaves()
    gs = ad.grad(model.loss(model.forward(P, x), y), P.values, build_graph=True)
    total = None
    for g in gs:
        s = ad.sum_all(ad.mul(g, g))
        total = s if total is None else ad.add(total, s)
    got = ad.grad(total, P.values)
    fd = ad.finite_difference_gradient(lambda arrs: sum(float(np.sum(g * g)) for g in first_grads(arrs)),
                                       theta.arrays(), eps)
    e = rel_err(got, fd)
    return CheckResult("double backward (grad of squared grad norm)", e, tol, e < tol)


def meta_gradient_check(seed: int = 0, tol: float = 1e-4, eps: float = 1e-5, second_order: bool = True,
                        dims=(2, 4, 1)) -> CheckResult:
    """Second-order MAML meta-gradient, one task and one inner step, against finite differences over theta."""
    rng = np.random.default_rng(seed)
    model = MetaModel(tuple(dims), "leaky_relu", loss_kind="mse")
    theta = model.init_params(seed)
    xs, xq = rng.normal(size=(5, dims[0])), rng.normal(size=(5, dims[0]))
    ys, yq = rng.normal(size=(5, dims[-1])), rng.normal(size=(5, dims[-1]))
    task = Task(xs, ys, xq, yq, "gradcheck", "regression")
    hyper = MetaHyper(inner_lr=0.1, inner_steps=1, task_batch=1, second_order=second_order, optimizer="sgd")
    spec = AugmentSpec()
    got = meta_gradient(model, theta, [task], spec, hyper, np.random.default_rng(0))

    def outer(arrays):
        P = ParamSet([ad.parameter(a) for a in arrays], theta.adaptable)
        gs = ad.grad(model.loss(model.forward(P, xs), ys), P.values)
        phi = ParamSet([a - hyper.inner_lr * g for a, g in zip(arrays, gs)], theta.adaptable)
        with ad.no_graph():
            return float(model.loss(model.forward(phi, xq), yq).value)

    fd = ad.finite_difference_gradient(outer, theta.arrays(), eps)
    e = rel_err(got, fd)
    n = sum(a.size for a in theta.arrays())
    return CheckResult(f"second-order meta-gradient ({n} params)", e, tol, e < tol)


def gradient_checks(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + [second_order_check(seed), meta_gradient_check(seed)]


BETA_CASES = ((0.5, 0.5), (2.0, 2.0), (2.0, 1.0))


def beta_checks(seed: int = 0, n: int = 10**5) -> list[CheckResult]:
    """KS distance, mean and variance of the Gamma-ratio Beta sampler against the analytic distribution."""
    out = []
    for a, b in BETA_CASES:
        rng = np.random.default_rng([seed, int(a * 100), int(b * 100)])
        x = sample_beta(a, b, rng, size=n)
        ks = float(stats.kstest(x, stats.beta(a, b).cdf).statistic)
        mean, var = a / (a + b), a * b / ((a + b) ** 2 * (a + b + 1))
        dm = abs(x.mean() - mean) / mean
        dv = abs(x.var() - var) / var
        out += [
            CheckResult(f"Beta({a},{b}) KS distance", ks, 0.01, ks < 0.01),
            CheckResult(f"Beta({a},{b}) mean rel. error", dm, 0.01, dm < 0.01),
            CheckResult(f"Beta({a},{b}) variance rel. error", dv, 0.10, dv < 0.10),
        ]
    return out

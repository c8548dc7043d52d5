from dataclasses import replace

import numpy as np
import pytest

from metamix import autodiff as ad
from metamix.augment import AugmentSpec, Strategy, build_outer_batch, plan_task
from metamix.checks import meta_gradient_check
from metamix.meta import (
    Adam,
    DivergenceError,
    MetaHyper,
    inner_adapt,
    meta_gradient,
    meta_test,
    outer_step,
    task_outer_loss,
)
from metamix.model import MetaModel, ParamSet
from metamix.tasks import Task, make_ambiguous_regression_pool, make_nme_classification_pool, sample_task


def reg_tasks(n, seed=0, d=2, k=5):
    rng = np.random.default_rng(seed)
    return [Task(rng.normal(size=(k, d)), rng.normal(size=(k, 1)), rng.normal(size=(k, d)),
                 rng.normal(size=(k, 1)), f"t{i}", "regression") for i in range(n)]


def same(a, b):
    return all(np.asarray(x).tobytes() == np.asarray(y).tobytes() for x, y in zip(a, b))


def test_zero_inner_steps_returns_init():
    model = MetaModel((2, 4, 1))
    theta = model.init_params(0)
    (t,) = reg_tasks(1)
    phi = inner_adapt(model, theta, t.xs, t.ys, MetaHyper(inner_steps=0), build_graph=False)
    assert same(phi.arrays(), theta.arrays())


def test_linear_one_step_closed_form():
    model = MetaModel((3, 2), loss_kind="mse")
    rng = np.random.default_rng(1)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    theta = ParamSet([W, b], (True,))
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    mu = 0.07
    phi = inner_adapt(model, theta, X, Y, MetaHyper(inner_lr=mu), build_graph=False)
    # mse averages over rows and outputs
    R = X @ W + b - Y
    n = R.size
    np.testing.assert_allclose(phi.arrays()[0], W - mu * 2 * X.T @ R / n, atol=1e-10)
    np.testing.assert_allclose(phi.arrays()[1], b - mu * 2 * R.sum(0) / n, atol=1e-10)


def test_anil_freezes_body():
    model = MetaModel((2, 4, 1))
    theta = model.init_params(0, head_only=True)
    (t,) = reg_tasks(1)
    phi = inner_adapt(model, theta, t.xs, t.ys, MetaHyper(inner_lr=0.5, inner_steps=3, variant="ANIL"), False)
    assert same(phi.arrays()[:2], theta.arrays()[:2])
    assert not same(phi.arrays()[2:], theta.arrays()[2:])


def test_metasgd_uses_per_parameter_rates():
    model = MetaModel((2, 1))
    theta = model.init_params(0, metasgd_lr=0.0)
    theta.rates[0] = np.array([[0.3], [0.0]])
    (t,) = reg_tasks(1)
    phi = inner_adapt(model, theta, t.xs, t.ys, MetaHyper(variant="MetaSGD"), False)
    assert phi.arrays()[0][1, 0] == theta.arrays()[0][1, 0]
    assert phi.arrays()[0][0, 0] != theta.arrays()[0][0, 0]
    assert same(phi.arrays()[1:], theta.arrays()[1:])


def test_empty_support_rejected():
    model = MetaModel((2, 1))
    with pytest.raises(ValueError):
        inner_adapt(model, model.init_params(0), np.zeros((0, 2)), np.zeros((0, 1)), MetaHyper(), False)


def test_nan_in_inner_loop_names_step():
    model = MetaModel((1, 1))
    theta = ParamSet([np.array([[1e200]]), np.zeros(1)], (True,))
    with pytest.raises(ad.GradientError, match="inner step 0"):
        inner_adapt(model, theta, np.array([[1e200]]), np.zeros((1, 1)), MetaHyper(), False)


def test_meta_gradient_matches_finite_differences():
    res = meta_gradient_check()
    assert res.passed, res.line()


def test_six_parameter_meta_gradient():
    res = meta_gradient_check(dims=(1, 1, 2), seed=3)  # 2 + 4 parameters
    assert "6 params" in res.name
    assert res.passed, res.line()


def test_fomaml_matches_maml_only_without_inner_steps():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(2)
    tasks = reg_tasks(2, seed=5)
    spec = AugmentSpec()

    def g(**kw):
        return meta_gradient(model, theta, tasks, spec, MetaHyper(inner_lr=0.3, **kw), np.random.default_rng(0))

    assert same(g(inner_steps=0), g(inner_steps=0, variant="FOMAML"))
    a, b = g(inner_steps=1), g(inner_steps=1, variant="FOMAML")
    assert max(np.abs(x - y).max() for x, y in zip(a, b)) > 1e-6


def test_zero_outer_lr_keeps_theta():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(0)
    for opt in ("sgd", "adam"):
        hyper = MetaHyper(outer_lr=0.0, optimizer=opt)
        new, _ = outer_step(model, theta, reg_tasks(3), AugmentSpec(Strategy.METAMIX), hyper,
                            np.random.default_rng(0), Adam(0.0) if opt == "adam" else None)
        assert same(new.arrays(), theta.arrays())


def test_none_strategy_is_vanilla_maml_update():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(0)
    tasks = reg_tasks(2)
    hyper = MetaHyper(inner_lr=0.2, outer_lr=0.1)
    new, rec = outer_step(model, theta, tasks, AugmentSpec(), hyper, np.random.default_rng(0))

    # textbook update: query loss at the adapted parameters, averaged over tasks
    P = theta.as_leaves()
    total = None
    for t in tasks:
        phi = inner_adapt(model, P, t.xs, t.ys, hyper, build_graph=True)
        lt = model.loss(model.forward(phi, t.xq), t.yq)
        total = lt if total is None else ad.add(total, lt)
    outer = ad.scale(total, 0.5)
    grads = ad.grad(outer, P.values)
    expect = [a - 0.1 * g for a, g in zip(theta.arrays(), grads)]
    for x, y in zip(new.arrays(), expect):
        np.testing.assert_allclose(x, y, atol=1e-14)
    assert rec.outer_loss == pytest.approx(float(outer.value))
    assert rec.to_dict()["kind"] == "iter"


def test_metasgd_rates_are_meta_learned():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(0, metasgd_lr=0.1)
    new, _ = outer_step(model, theta, reg_tasks(2), AugmentSpec(), MetaHyper(variant="MetaSGD", outer_lr=0.1),
                        np.random.default_rng(0))
    assert not same(new.rate_arrays(), theta.rate_arrays())


def test_divergence_detected():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(0)
    tasks = reg_tasks(1)
    tasks[0].yq[:] = 1e5
    with pytest.raises(DivergenceError, match="step 7"):
        outer_step(model, theta, tasks, AugmentSpec(), MetaHyper(divergence_threshold=1e3),
                   np.random.default_rng(0), step=7)


def test_support_enters_metamix_outer_loss():
    model = MetaModel((2, 3, 1))
    theta = model.init_params(0)
    (t,) = reg_tasks(1)
    hyper = MetaHyper(inner_lr=0.1)
    P = theta.as_leaves()

    spec = AugmentSpec(Strategy.METAMIX, layers=(1,))
    rng = np.random.default_rng(3)
    loss, phi = task_outer_loss(model, P, plan_task(spec, t, model.n_layers, rng, rng), spec, hyper, rng, rng)
    base_loss = float(loss.value)

    # hold phi fixed, shift the support rows, replay the same randomness
    ablated = replace(t, xs=t.xs + 3.0)
    rng = np.random.default_rng(3)
    plan = plan_task(spec, ablated, model.n_layers, rng, rng)
    (ob,) = build_outer_batch(spec, plan, lambda x, l: model.forward_to_layer(phi, x, l), rng, rng)
    mixed_loss = float(model.loss(model.forward_from_layer(phi, ob.h, ob.layer), ob.y).value)
    assert abs(mixed_loss - base_loss) > 1e-6

    # under None the same ablation has no effect once phi is fixed
    (ob,) = build_outer_batch(AugmentSpec(), plan_task(AugmentSpec(), ablated, 2, rng, rng),
                              lambda x, l: model.forward_to_layer(phi, x, l), rng, rng)
    none_loss = float(model.loss(model.forward_from_layer(phi, ob.h, ob.layer), ob.y).value)
    assert none_loss == float(model.loss(model.forward(phi, t.xq), t.yq).value)


def test_channel_shuffle_training_step_runs():
    pool = make_nme_classification_pool(3, 3, 4, 5, seed=0)
    model = MetaModel((4, 6, 3), loss_kind="softmax_ce")
    theta = model.init_params(0)
    rng = np.random.default_rng(0)
    tasks = [sample_task(pool, "train", 2, 2, rng) for _ in range(2)]
    for s in (Strategy.CHANNEL_SHUFFLE, Strategy.MMCF, Strategy.MIX_ALL, Strategy.SET_SHUFFLE,
              Strategy.META_AUG, Strategy.CONCAT, Strategy.MIX_SS, Strategy.MIX_QQ, Strategy.MIX_COB):
        new, rec = outer_step(model, theta, tasks, AugmentSpec(s), MetaHyper(inner_lr=0.1, outer_lr=0.1), rng)
        assert np.isfinite(rec.outer_loss)
        assert not same(new.arrays(), theta.arrays())


def test_meta_test_zero_steps_pre_equals_post():
    pool = make_ambiguous_regression_pool(5, 2, 0.1, seed=0, n_eval_tasks=10)
    model = MetaModel((2, 8, 1))
    s = meta_test(model, model.init_params(0), pool, MetaHyper(), 10, np.random.default_rng(0), inner_steps=0)
    assert [t.pre for t in s.tasks] == [t.post for t in s.tasks]
    assert s.gap == 0.0


def test_meta_test_is_strategy_independent():
    # meta-testing takes no augmentation input at all, so the same theta gives identical bytes
    pool = make_nme_classification_pool(3, 3, 4, 5, seed=0)
    model = MetaModel((4, 6, 3), loss_kind="softmax_ce")
    theta = model.init_params(0)
    runs = [meta_test(model, theta, pool, MetaHyper(inner_lr=0.3), 8, np.random.default_rng(1)) for _ in range(2)]
    assert [(t.pre, t.post) for t in runs[0].tasks] == [(t.pre, t.post) for t in runs[1].tasks]


def test_meta_test_does_not_read_query_labels_before_scoring(monkeypatch):
    pool = make_ambiguous_regression_pool(5, 2, 0.1, seed=0, n_eval_tasks=4)
    model = MetaModel((2, 4, 1))
    theta = model.init_params(0)
    seen = []
    import metamix.meta as meta_mod

    real = meta_mod.inner_adapt

    def spy(model, params, xs, ys, hyper, build_graph, loss_fn=None):
        seen.append(ys.copy())
        return real(model, params, xs, ys, hyper, build_graph, loss_fn)

    monkeypatch.setattr(meta_mod, "inner_adapt", spy)
    rng = np.random.default_rng(0)
    meta_test(model, theta, pool, MetaHyper(), 4, rng)
    replay = np.random.default_rng(0)
    for ys in seen:
        t = sample_task(pool, "test", 5, 5, replay)
        assert np.array_equal(ys, t.ys)


def test_meta_test_empty_split():
    pool = make_ambiguous_regression_pool(5, 2, 0.1, seed=0, n_eval_tasks=0)
    model = MetaModel((2, 4, 1))
    with pytest.raises(ValueError, match="empty"):
        meta_test(model, model.init_params(0), pool, MetaHyper(), 3, np.random.default_rng(0))


def test_hyper_validation():
    with pytest.raises(ValueError):
        MetaHyper(inner_lr=0.0)
    with pytest.raises(ValueError):
        MetaHyper(inner_steps=-1)
    with pytest.raises(ValueError):
        MetaHyper(variant="Reptile")
    assert not MetaHyper(variant="FOMAML").uses_second_order

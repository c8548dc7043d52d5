import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from metamix.model import MetaModel
from metamix.tasks import make_nme_classification_pool, sample_task
from metamix.theory import (
    TwoLayerInstance,
    capacity_quantities,
    centered_instance,
    cf_direct_loss,
    cf_enumerated_loss,
    cf_mc_loss,
    cf_regularizer_prediction,
    clamp_bias_bound,
    class_centered_instance,
    mixup_constant,
    mixup_constant_closed_form,
    mixup_constant_quad,
    mixup_direct_loss,
    mixup_exact_loss,
    mixup_mc_loss,
    mixup_regularizer_prediction,
    sample_mixture_lambda,
    shuffled_features,
    track_capacity,
    verify_theorem2,
)

# --- mixup constant -----------------------------------------------------------


def test_beta_ratio_moment_identity():
    # E[(1-t)^2 / t^2] under Beta(a, b) against direct quadrature
    for a, b in ((3.0, 2.0), (4.5, 1.5), (2.5, 3.0)):
        val, _ = integrate.quad(lambda t: (1 - t) ** 2 / t**2 * t ** (a - 1) * (1 - t) ** (b - 1)
                                / np.exp(special.betaln(a, b)), 0, 1)
        assert val == pytest.approx(b * (b + 1) / ((a - 1) * (a - 2)), rel=1e-8)


def test_constant_at_two_two():
    assert mixup_constant_closed_form(2.0, 2.0) == pytest.approx(1.5)
    assert mixup_constant_quad(2.0, 2.0) == pytest.approx(1.5, rel=1e-8)


def test_constant_stable_across_independent_runs():
    a = mixup_constant(2.0, 2.0, 1e-6, 10**6, np.random.default_rng(1))
    b = mixup_constant(2.0, 2.0, 1e-6, 10**6, np.random.default_rng(2))
    assert abs(a - b) / b < 0.01
    assert abs(a - 1.5) / 1.5 < 0.01


@pytest.mark.parametrize("alpha,beta", [(2.0, 3.0), (3.0, 2.0), (4.0, 4.0)])
def test_constant_closed_form_matches_quadrature(alpha, beta):
    assert mixup_constant_quad(alpha, beta) == pytest.approx(mixup_constant_closed_form(alpha, beta), rel=1e-7)


def test_constant_not_monotone_in_alpha():
    # the second mixture component Beta(beta + 1, alpha) pulls mass toward zero as alpha grows
    cs = [mixup_constant_closed_form(a, 2.0) for a in (2.0, 3.0, 4.0, 6.0)]
    assert cs[0] == pytest.approx(cs[1]) and cs[2] > cs[1] and cs[3] > cs[2]
    mc = [mixup_constant(a, 2.0, 1e-6, 4 * 10**5, np.random.default_rng(int(a))) for a in (3.0, 6.0)]
    assert mc[1] > mc[0]


def test_first_component_monotone_in_alpha():
    # E_Beta(a+1, b)[(1-t)^2/t^2] = b(b+1)/(a(a-1)) decreases in a
    vals = [2.0 * 3.0 / (a * (a - 1)) for a in np.linspace(1.5, 8, 20)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_constant_diverges_without_clamp():
    assert mixup_constant_closed_form(0.5, 0.5) == float("inf")
    assert clamp_bias_bound(0.5, 0.5, 1e-6) == float("inf")
    with pytest.raises(ValueError):
        mixup_constant(0.5, 0.5, eps_clamp=0.0)
    # with a clamp the constant is finite and large
    assert np.isfinite(mixup_constant_quad(0.5, 0.5, 1e-3))


def test_mixture_lambda_mean():
    lam = sample_mixture_lambda(2.0, 3.0, np.random.default_rng(0), 10**5)
    # 0.4 * Beta(3, 3) + 0.6 * Beta(4, 2)
    assert abs(lam.mean() - (0.4 * 0.5 + 0.6 * 4 / 6)) < 0.01


# --- mixup regularizer --------------------------------------------------------


def test_prediction_exact_at_zero_phi():
    inst = centered_instance(np.random.default_rng(0)).with_phi(np.zeros(5))
    pred, _ = mixup_regularizer_prediction(inst, 2.0, 2.0, mc_samples_for_c=1000, rng=np.random.default_rng(0))
    assert abs(pred - mixup_direct_loss(inst)) <= 1e-12


def test_regularizer_scales_quadratically():
    inst = centered_instance(np.random.default_rng(1))
    y0 = inst.features @ inst.phi  # targets that make residuals vanish, isolating the regularizer
    base = TwoLayerInstance(inst.W, inst.phi, inst.X, y0)
    double = TwoLayerInstance(inst.W, 2 * inst.phi, inst.X, 2 * y0)
    p1, _ = mixup_regularizer_prediction(base, 2.0, 2.0, rng=np.random.default_rng(5))
    p2, _ = mixup_regularizer_prediction(double, 2.0, 2.0, rng=np.random.default_rng(5))
    assert p2 == pytest.approx(4 * p1, rel=1e-12)


def test_lambda_one_gives_direct_loss():
    inst = centered_instance(np.random.default_rng(2))
    mean, se = mixup_mc_loss(inst, 2.0, 2.0, 100, np.random.default_rng(0), lam=1.0)
    assert mean == pytest.approx(mixup_direct_loss(inst), abs=1e-14) and se < 1e-12


def test_literal_mc_matches_closed_form():
    inst = centered_instance(np.random.default_rng(3), k=10, p=4)
    mean, se = mixup_mc_loss(inst, 2.0, 2.0, 2 * 10**5, np.random.default_rng(4))
    assert abs(mean - mixup_exact_loss(inst, 2.0, 2.0)) < 3 * se


def test_stderr_scaling():
    inst = centered_instance(np.random.default_rng(3), k=10, p=4)
    _, s1 = mixup_mc_loss(inst, 2.0, 2.0, 50000, np.random.default_rng(1))
    _, s2 = mixup_mc_loss(inst, 2.0, 2.0, 100000, np.random.default_rng(2))
    assert s2 / s1 == pytest.approx(1 / np.sqrt(2), rel=0.2)
    cinst = class_centered_instance(np.random.default_rng(0))
    _, s1 = cf_mc_loss(cinst, 0.8, 50000, np.random.default_rng(1))
    _, s2 = cf_mc_loss(cinst, 0.8, 100000, np.random.default_rng(2))
    assert s2 / s1 == pytest.approx(1 / np.sqrt(2), rel=0.2)


# --- channel shuffle ----------------------------------------------------------


def test_cf_delta_one_exact():
    inst = class_centered_instance(np.random.default_rng(0))
    for form in ("exact", "paper"):
        assert abs(cf_regularizer_prediction(inst, 1.0, form) - cf_direct_loss(inst)) <= 1e-12
    mean, se = cf_mc_loss(inst, 1.0, 50, np.random.default_rng(0))
    assert mean == pytest.approx(cf_direct_loss(inst), abs=1e-13) and se < 1e-13


def test_cf_zero_phi():
    inst = class_centered_instance(np.random.default_rng(1))
    zero = inst.with_phi(np.zeros_like(inst.phi))
    assert cf_regularizer_prediction(zero, 0.7) == pytest.approx(cf_direct_loss(zero), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.55, 1.0))
def test_cf_exact_form_equals_enumeration(seed, delta):
    rng = np.random.default_rng(seed)
    inst = class_centered_instance(rng, int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 7)))
    assert cf_regularizer_prediction(inst, delta) == pytest.approx(cf_enumerated_loss(inst, delta), rel=1e-10)


def test_cf_prediction_matches_mc():
    inst = class_centered_instance(np.random.default_rng(7), 5, 4, 6)
    mean, se = cf_mc_loss(inst, 0.8, 2 * 10**5, np.random.default_rng(8))
    assert abs(mean - cf_regularizer_prediction(inst, 0.8)) < 3 * se


def test_theorem2_runner_small():
    reports = verify_theorem2(n_instances=2, deltas=(0.8,), mc_samples=10**5, seed=3)
    assert all(r.passed for r in reports), [r.lines() for r in reports]


def test_cf_rejects_uncentered_classes():
    inst = class_centered_instance(np.random.default_rng(0))
    shifted = TwoLayerInstance(inst.W, inst.phi, inst.X + 1.0, inst.y, inst.classes)
    with pytest.raises(ValueError, match="not zero"):
        cf_regularizer_prediction(shifted, 0.8)
    with pytest.raises(ValueError, match="no class split"):
        cf_regularizer_prediction(centered_instance(np.random.default_rng(0)), 0.8)


def test_shuffled_features_unbiased_channelwise():
    inst = class_centered_instance(np.random.default_rng(2), 4, 3, 5)
    X = shuffled_features(inst, 0.8, np.random.default_rng(3), 10**5)
    mean = X.mean(0)
    se = X.std(0, ddof=1) / np.sqrt(len(X))
    assert np.all(np.abs(mean - inst.features) <= 3 * se + 1e-12)


# --- capacity -------------------------------------------------------------------


def test_zero_head_gives_zero_gamma():
    H = np.random.default_rng(0).normal(size=(10, 4))
    g, r, _ = capacity_quantities(H, np.zeros(4))
    assert g == 0.0 and r == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31))
def test_rank_bounded_by_samples(k, seed):
    H = np.random.default_rng(seed).normal(size=(k, 8))
    _, r, _ = capacity_quantities(H, np.ones(8))
    assert r <= k


def test_gamma_is_quadratic_form():
    rng = np.random.default_rng(0)
    H, w = rng.normal(size=(20, 3)), rng.normal(size=(3, 2))
    g, _, _ = capacity_quantities(H, w)
    assert g == pytest.approx(np.sum((H @ w) ** 2) / 20)


def test_track_capacity_per_task():
    pool = make_nme_classification_pool(3, 3, 4, 5, seed=0)
    model = MetaModel((4, 6, 3), loss_kind="softmax_ce")
    theta = model.init_params(0)
    rng = np.random.default_rng(0)
    tasks = [sample_task(pool, "test", 2, 3, rng) for _ in range(4)]
    track = track_capacity(model, [theta] * 4, tasks)
    assert len(track.gammas) == 4 and all(g > 0 for g in track.gammas)
    assert all(r <= 6 for r in track.ranks)

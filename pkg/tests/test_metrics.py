import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metamix.metrics import TaskMetric, accuracy, mean_ci95, mse, r_squared, summarize_r2


def test_r2_identity_and_anticorrelation():
    a = np.array([1.0, 3.0, 2.0, 5.0])
    assert r_squared(a, a) == pytest.approx(1.0)
    # squared Pearson: a perfect inverse predictor also scores 1
    assert r_squared(-a, a) == pytest.approx(1.0)


def test_r2_constant_prediction_is_zero():
    assert r_squared(np.full(4, 2.0), np.array([1.0, 3.0, 2.0, 5.0])) == 0.0


def test_r2_errors():
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])
    with pytest.raises(ValueError):
        r_squared([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-10, 10)),
    arrays(np.float64, 6, elements=st.floats(-10, 10)),
    st.floats(0.1, 10).flatmap(lambda s: st.sampled_from([s, -s])),
    st.floats(-5, 5),
)
def test_r2_affine_invariance(p, a, scale, shift):
    if np.ptp(p) < 1e-3 or np.ptp(a) < 1e-3:
        return
    assert r_squared(scale * p + shift, a) == pytest.approx(r_squared(p, a), abs=1e-12)
    assert r_squared(p, scale * a + shift) == pytest.approx(r_squared(p, a), abs=1e-12)


def test_summarize_example():
    mean, median, count = summarize_r2([0.2, 0.4, 0.6])
    assert mean == pytest.approx(0.4) and median == 0.4 and count == 2
    assert summarize_r2([0.3])[2] == 0
    assert summarize_r2([TaskMetric("a", 0.5, 3), TaskMetric("b", 0.1, 3)])[2] == 1
    with pytest.raises(ValueError):
        summarize_r2([])


def test_summarize_count_matches_recount():
    vals = np.random.default_rng(0).uniform(size=100)
    assert summarize_r2(vals)[2] == sum(1 for v in vals if v > 0.3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
def test_summarize_permutation_invariant(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    a, b = summarize_r2(vals), summarize_r2(shuffled)
    assert a[1:] == b[1:] and a[0] == pytest.approx(b[0])


def test_ci_examples():
    assert mean_ci95([2.0, 2.0, 2.0]) == (2.0, 0.0)
    m, h = mean_ci95([0.0, 1.0])
    assert m == 0.5 and h == pytest.approx(0.98, abs=1e-3)
    with pytest.raises(ValueError):
        mean_ci95([1.0])


def test_ci_quadrupled_n_halves_width():
    base = [0.0, 1.0, 2.0, 3.0]
    _, h1 = mean_ci95(base)
    _, h4 = mean_ci95(base * 4)
    # sample sd changes slightly with n (ddof=1); compare with the population-sd correction removed
    sd1, sd4 = np.std(base, ddof=1), np.std(base * 4, ddof=1)
    assert h4 / sd4 == pytest.approx(0.5 * h1 / sd1)


def test_accuracy_and_mse():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    onehot = np.eye(2)[[0, 1, 1]]
    assert accuracy(logits, onehot) == pytest.approx(2 / 3)
    assert mse(np.array([1.0, 2.0]), np.array([0.0, 0.0])) == 2.5

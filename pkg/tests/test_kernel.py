import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpocc.kernel import (
    ConditionedGP,
    ContractViolation,
    KernelParams,
    NumericalFailure,
    SPDFactor,
    TrainingSet,
    gp_posterior,
    matern_half,
    solve_spd,
)


def dense_posterior(query, X, Y, prior, l, sigma2):
    """Direct evaluation of the GP posterior with an explicit inverse (test oracle)."""
    X = np.atleast_2d(X)
    n = len(X)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            K[i, j] = math.exp(-math.dist(X[i], X[j]) / l)
    k = np.array([math.exp(-math.dist(query, x) / l) for x in X])
    Ainv = np.linalg.inv(K + sigma2 * np.eye(n))
    mx = np.array([prior(x) for x in X])
    mean = prior(query) + k @ Ainv @ (np.asarray(Y) - mx)
    var = 1.0 - k @ Ainv @ k
    return mean, var


# -- kernel ---------------------------------------------------------------------


def test_matern_examples():
    p = KernelParams(lengthscale=1.0)
    assert matern_half(0.0, p) == 1.0
    assert matern_half(1.0, p) == pytest.approx(0.3678794, abs=1e-7)
    assert matern_half(1.0, p) * matern_half(2.0, p) == pytest.approx(matern_half(3.0, p), abs=1e-15)


def test_matern_rejects_negative_distance():
    with pytest.raises(ContractViolation):
        matern_half(-0.1, KernelParams())


def test_kernel_params_validation():
    with pytest.raises(ContractViolation):
        KernelParams(lengthscale=0.0)
    with pytest.raises(ContractViolation):
        KernelParams(jitter=-1.0)
    with pytest.raises(ContractViolation):
        KernelParams(signal_variance=2.0)


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 10))
def test_product_rule(a, b, l):
    p = KernelParams(lengthscale=l)
    assert abs(matern_half(a, p) * matern_half(b, p) - matern_half(a + b, p)) <= 1e-12


@given(st.lists(st.floats(0, 20), min_size=2, max_size=10), st.floats(0.05, 5))
def test_matern_monotone_decreasing(ds, l):
    p = KernelParams(lengthscale=l)
    ds = sorted(ds)
    vals = matern_half(np.array(ds), p)
    assert np.all(np.diff(vals) <= 0)
    assert np.all((vals > 0) & (vals <= 1))


# -- SPD solves -----------------------------------------------------------------


def test_solve_spd_examples():
    assert np.allclose(solve_spd(np.eye(3), [1.0, 2.0, 3.0], jitter=0.0), [1, 2, 3])
    assert np.allclose(solve_spd(np.array([[2.0, 1.0], [1.0, 2.0]]), [3.0, 3.0], jitter=0.0), [1, 1])


def test_solve_spd_matches_inverse(rng):
    for _ in range(20):
        B = rng.normal(size=(10, 10))
        A = B @ B.T + 10 * np.eye(10)
        b = rng.normal(size=10)
        x = solve_spd(A, b)
        assert np.max(np.abs(x - np.linalg.inv(A) @ b)) <= 1e-8
        assert np.max(np.abs(A @ x - b)) <= 1e-8 * np.max(np.abs(b))


def test_factor_reused_for_several_rhs(rng):
    B = rng.normal(size=(6, 6))
    A = B @ B.T + np.eye(6)
    f = SPDFactor(A)
    R = rng.normal(size=(6, 3))
    assert np.allclose(A @ f.solve(R), R, atol=1e-9)
    L = f.lower
    assert np.allclose(f.half_solve(R), np.linalg.solve(L, R))


def test_asymmetric_matrix_rejected():
    with pytest.raises(ContractViolation):
        SPDFactor(np.array([[1.0, 0.5], [0.4, 1.0]]))


def test_jitter_escalation_recovers_semidefinite():
    # rank-deficient PSD matrix: fails with no jitter, succeeds once jitter kicks in
    A = np.ones((3, 3))
    f = SPDFactor(A, jitter=0.0)
    assert f.jitter > 0
    assert np.all(np.isfinite(f.lower))


def test_numerical_failure_carries_diagnostics():
    A = np.array([[1.0, 0.0], [0.0, -5.0]])
    with pytest.raises(NumericalFailure) as info:
        SPDFactor(A, jitter=1e-10)
    err = info.value
    assert err.n == 2
    assert err.min_diag == -5.0
    assert err.jitter == pytest.approx(8e-10)
    located = err.with_location((1.0, 2.0))
    assert located.location == (1.0, 2.0)


# -- posterior --------------------------------------------------------------------


def test_empty_training_recovers_prior():
    post = gp_posterior([0.3, 0.4], TrainingSet(np.zeros((0, 2)), []), lambda x: 0.0, KernelParams())
    assert (post.mean, post.variance) == (0.0, 1.0)


def _fig_setup():
    p = KernelParams(lengthscale=1.0)
    gamma = math.exp(2.0)

    def prior(x):
        return gamma * math.exp(-abs(float(np.ravel(x)[0])))

    return p, gamma, prior


def test_pin_down_at_measurement():
    p, _, prior = _fig_setup()
    train = TrainingSet([[1.5]], [1.0], noise_sigma2=0.0)
    post = gp_posterior([1.5], train, prior, p)
    assert post.mean == pytest.approx(1.0, abs=1e-9)
    assert post.variance <= 10 * p.jitter


def test_translation_beyond_measurement():
    p, _, prior = _fig_setup()
    train = TrainingSet([[1.5]], [1.0], noise_sigma2=0.0)
    post = gp_posterior([2.0], train, prior, p)
    assert post.mean == pytest.approx(math.exp(-0.5), abs=1e-9)
    oracle, _ = dense_posterior([2.0], [[1.5]], [1.0], prior, 1.0, 0.0)
    assert post.mean == pytest.approx(oracle, abs=1e-9)


@given(st.floats(0.2, 3.0), st.floats(0.05, 0.95), st.floats(0.2, 2.0), st.floats(0.0, 5.0), st.floats(-5, 5))
def test_translation_property_1d(r_max, frac, l, x, s):
    # jitter would bias the pinned value by jitter * |c - m(p)|; the identity is about the exact model
    p = KernelParams(lengthscale=l, jitter=0.0)
    gamma = math.exp(r_max / l)
    pt = s + frac * r_max

    def prior(q):
        return gamma * math.exp(-abs(float(np.ravel(q)[0]) - s) / l)

    train = TrainingSet([[pt]], [1.0], noise_sigma2=0.0)
    post = gp_posterior([pt + x], train, prior, p)
    assert abs(post.mean - gamma * math.exp(-(r_max + x) / l)) <= 1e-9


def test_oracle_equivalence_random(rng):
    for _ in range(200):
        n = rng.integers(1, 9)
        X = rng.uniform(-2, 2, size=(n, 2))
        Y = rng.normal(size=n)
        l = rng.uniform(0.1, 2.0)
        sigma2 = rng.choice([0.0, 1e-6, 1e-2])
        a, b = rng.normal(size=2)

        def prior(q, a=a, b=b):
            return a + b * float(np.ravel(q)[0])

        q = rng.uniform(-3, 3, size=2)
        post = gp_posterior(q, TrainingSet(X, Y, sigma2), prior, KernelParams(lengthscale=l, jitter=0.0))
        m, v = dense_posterior(q, X, Y, prior, l, sigma2)
        assert abs(post.mean - m) <= 1e-8
        assert abs(post.variance - max(v, 0.0)) <= 1e-8


def test_variance_at_training_inputs(rng):
    X = rng.uniform(0, 3, size=(6, 2))
    p = KernelParams(lengthscale=0.5)
    gp = ConditionedGP(TrainingSet(X, np.full(6, 2.0), 0.0), np.zeros(6), p)
    mean, var = gp.predict(X, np.zeros(6))
    assert np.all(var <= 10 * p.jitter)
    assert np.max(np.abs(mean - 2.0)) <= 1e-6


def test_reverts_to_prior_far_away(rng):
    l = 0.3
    X = rng.uniform(0, 1, size=(5, 2))
    gp = ConditionedGP(TrainingSet(X, np.ones(5), 1e-6), np.full(5, 0.2), KernelParams(lengthscale=l))
    far = np.array([[1.0 + 20 * l + 1.5, 0.5]])
    mean, var = gp.predict(far, [0.7])
    assert abs(var[0] - 1.0) <= 1e-6
    assert abs(mean[0] - 0.7) <= 1e-6


@given(st.integers(0, 10_000))
def test_variance_bounds(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    X = r.uniform(-1, 1, size=(n, 2))
    p = KernelParams(lengthscale=float(r.uniform(0.1, 1.0)))
    gp = ConditionedGP(TrainingSet(X, r.normal(size=n), 1e-6).deduplicated(), np.zeros(n), p)
    _, var = gp.predict(r.uniform(-2, 2, size=(20, 2)), np.zeros(20))
    assert np.all(var >= 0) and np.all(var <= 1 + p.jitter)


def test_duplicates_removed_before_solve():
    train = TrainingSet([[0.0, 0.0], [0.0, 1e-12], [1.0, 0.0]], [1.0, 1.0, 1.0], noise_sigma2=0.0)
    assert train.unique_indices() == [0, 2]
    post = gp_posterior([0.0, 0.0], train, lambda x: 0.0, KernelParams(jitter=0.0))
    assert post.mean == pytest.approx(1.0, abs=1e-9)


def test_training_set_length_mismatch():
    with pytest.raises(ContractViolation):
        TrainingSet([[0.0, 0.0]], [1.0, 2.0])

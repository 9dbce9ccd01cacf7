"""Two-stage least squares and the regularization path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

import oracles
from ridgeiv import (
    ModelSpec,
    RidgeConfig,
    SingularDesignError,
    benchmark_spec,
    beta_foc_residual,
    generate_dataset,
    q_derivatives,
    refine_alpha,
    ridge_beta,
    ridge_path_estimate,
    select_alpha,
    split,
    tsls,
)
from ridgeiv import test_objective as held_out_q  # alias: keep pytest collection away
from ridgeiv.model import Dataset

# ---------------------------------------------------------------------------
# Frozen fixture: 6 observations, 3 instruments, 2 regressors. The expected
# values were precomputed with numpy.linalg.lstsq (two explicit stages) and an
# explicit projection matrix, independent of any code in this package.
# ---------------------------------------------------------------------------
FIX_Z = np.array(
    [
        [1.0, -1.0, 2.0],
        [2.0, 0.5, -1.0],
        [-1.0, 1.5, 0.0],
        [0.5, 2.0, 1.0],
        [-2.0, -0.5, 1.5],
        [1.5, 1.0, -0.5],
    ]
)
FIX_X = np.array(
    [
        [1.0, 0.5],
        [2.5, -1.0],
        [-0.5, 2.0],
        [1.5, 1.0],
        [-1.0, -2.5],
        [2.0, 0.5],
    ]
)
FIX_Y = np.array([1.0, 3.0, -2.0, 0.5, -1.5, 2.5])
FIX_BETA = np.array([1.4680133989317885, -0.9944080789999664])
FIX_SIGMA2 = 1.6897510667185884
FIX_COV = np.array(
    [
        [1.2606047386017916, -1.5035906373006676],
        [-1.5035906373006673, 4.33961141152956],
    ]
)

# 5-observation fixture for the held-out criterion, same provenance.
FIX_TEST = Dataset(
    y=np.array([0.5, -1.0, 2.0, 1.5, -0.5]),
    x=np.array([[1.0, -1.0], [0.5, 2.0], [-1.5, 0.5], [2.0, 1.5], [1.0, -0.5]]),
    z=np.array(
        [
            [0.5, 1.0, -1.0],
            [1.5, -0.5, 0.5],
            [-1.0, 2.0, 1.0],
            [2.0, 1.0, -0.5],
            [-0.5, -1.5, 2.0],
        ]
    ),
    split_at=0,
)
FIX_TEST_BETA = np.array([0.3, -0.7])
FIX_TEST_Q = 1.1429429690245494


def make_instance(seed, n=60):
    """A random, well-conditioned train/test pair plus its shrinkage target."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(0.3, 1.2)
    prior = rng.normal(0.0, 1.2, size=2)
    spec = benchmark_spec(delta, n, prior)
    data = generate_dataset(spec, int(rng.integers(2**31)))
    train, test = split(data)
    return train, test, prior


def noise_free_data(n=50, seed=4):
    gamma0 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    beta0 = np.array([0.8, -0.4])
    spec = ModelSpec(
        n=n, k=2, m=3, beta0=beta0, gamma0=gamma0,
        prior=np.array([2.0, 2.0]), tau=0.7,
        err_cov=np.zeros((3, 3)), rz=np.eye(3),
    )
    return generate_dataset(spec, seed), beta0


# -- two-stage least squares -------------------------------------------------


def test_tsls_frozen_fixture():
    res = tsls(Dataset(y=FIX_Y, x=FIX_X, z=FIX_Z, split_at=0))
    np.testing.assert_allclose(res.beta, FIX_BETA, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.sigma2, FIX_SIGMA2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.cov, FIX_COV, rtol=0, atol=1e-11)


def test_tsls_matches_lstsq_route():
    for seed in range(20):
        train, test, _ = make_instance(seed)
        for data in (train, test):
            res = tsls(data)
            beta, cov, sigma2 = oracles.two_stage_lstsq(data.y, data.x, data.z)
            np.testing.assert_allclose(res.beta, beta, rtol=1e-9, atol=1e-11)
            np.testing.assert_allclose(res.sigma2, sigma2, rtol=1e-9)
            np.testing.assert_allclose(res.cov, cov, rtol=1e-8, atol=1e-10)


def test_tsls_exact_identification():
    data, beta0 = noise_free_data()
    np.testing.assert_allclose(tsls(data).beta, beta0, rtol=0, atol=1e-12)
    assert tsls(data).sigma2 < 1e-24


def test_tsls_singular_instruments():
    z = FIX_Z.copy()
    z[:, 2] = z[:, 0]  # exactly collinear instruments
    with pytest.raises(SingularDesignError) as err:
        tsls(Dataset(y=FIX_Y, x=FIX_X, z=z, split_at=0))
    assert "instrument" in err.value.matrix_name
    assert err.value.cond > 1e12
    assert "condition number" in str(err.value)


# -- the path solution --------------------------------------------------------


def test_ridge_alpha_zero_is_training_tsls():
    train, _, prior = make_instance(1)
    np.testing.assert_allclose(
        ridge_beta(train, 0.0, prior), tsls(train).beta, rtol=1e-10, atol=1e-12
    )


def test_ridge_alpha_huge_reaches_prior():
    train, _, prior = make_instance(2)
    assert np.max(np.abs(ridge_beta(train, 1e12, prior) - prior)) < 1e-6


def test_ridge_constant_path_when_prior_is_tsls():
    train, _, _ = make_instance(3)
    prior = tsls(train).beta
    for alpha in (0.0, 1.0, 1e3):
        np.testing.assert_allclose(
            ridge_beta(train, alpha, prior), prior, rtol=1e-10, atol=1e-12
        )


def test_ridge_matches_derivative_free_minimizer():
    train, _, prior = make_instance(5, n=30)
    alpha = 0.37
    res = minimize(
        lambda b: oracles.ridge_objective(train, b, alpha, prior),
        x0=prior,
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20_000, "maxfev": 20_000},
    )
    assert res.success
    assert np.max(np.abs(ridge_beta(train, alpha, prior) - res.x)) < 1e-6


def test_foc_residual_small_across_decades():
    for seed in range(10):
        train, _, prior = make_instance(seed)
        for alpha in np.logspace(-4, 4, 9):
            beta = ridge_beta(train, alpha, prior)
            resid = beta_foc_residual(train, beta, alpha, prior)
            assert np.max(np.abs(resid)) <= 1e-8 * (1.0 + np.linalg.norm(beta))


def test_foc_at_prior_drops_penalty():
    train, _, prior = make_instance(6)
    n1 = train.n
    p = oracles.projection_matrix(train.z)
    expected = -train.x.T @ p @ (train.y - train.x @ prior) / n1
    for alpha in (0.0, 3.7):  # penalty term vanishes at beta = prior
        got = beta_foc_residual(train, prior, alpha, prior)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_foc_is_objective_gradient():
    train, _, prior = make_instance(7)
    rng = np.random.default_rng(7)
    beta = rng.normal(size=2)
    alpha = 0.42
    h = 1e-6
    fd = np.empty(2)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd[j] = (
            oracles.ridge_objective(train, beta + e, alpha, prior)
            - oracles.ridge_objective(train, beta - e, alpha, prior)
        ) / (2 * h)
    np.testing.assert_allclose(
        beta_foc_residual(train, beta, alpha, prior), fd, rtol=1e-6, atol=1e-8
    )


# -- the held-out criterion ---------------------------------------------------


def test_objective_zero_at_exact_fit():
    x = FIX_TEST.x
    data = Dataset(y=x @ FIX_TEST_BETA, x=x, z=FIX_TEST.z, split_at=0)
    assert held_out_q(data, FIX_TEST_BETA) == 0.0


def test_objective_invariant_to_instrument_basis():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    rotated = Dataset(y=FIX_TEST.y, x=FIX_TEST.x, z=FIX_TEST.z @ a, split_at=0)
    q0 = held_out_q(FIX_TEST, FIX_TEST_BETA)
    q1 = held_out_q(rotated, FIX_TEST_BETA)
    np.testing.assert_allclose(q1, q0, rtol=1e-12)


def test_objective_frozen_fixture():
    np.testing.assert_allclose(
        held_out_q(FIX_TEST, FIX_TEST_BETA), FIX_TEST_Q, rtol=1e-13
    )


def test_q_derivatives_vanish_on_constant_path():
    train, test, _ = make_instance(9)
    prior = tsls(train).beta
    for alpha in (0.0, 0.3, 10.0):
        dq, d2q = q_derivatives(train, test, alpha, prior)
        assert abs(dq) < 1e-12 and abs(d2q) < 1e-12


def test_q_derivatives_match_finite_differences():
    for seed in range(10):
        train, test, prior = make_instance(seed + 100)

        def q(alpha):
            return held_out_q(test, ridge_beta(train, alpha, prior))

        for alpha in (0.05, 0.7, 5.0):
            dq, d2q = q_derivatives(train, test, alpha, prior)
            h1 = 1e-5
            fd1 = (q(alpha + h1) - q(alpha - h1)) / (2 * h1)
            assert abs(dq - fd1) <= max(1e-4 * abs(fd1), 1e-9)
            h2 = 1e-4
            fd2 = (q(alpha + h2) - 2 * q(alpha) + q(alpha - h2)) / h2**2
            assert abs(d2q - fd2) <= max(1e-4 * abs(fd2), 1e-6)

        # the path is only defined for alpha >= 0, so the boundary check uses
        # second-order one-sided stencils
        dq, d2q = q_derivatives(train, test, 0.0, prior)
        h = 1e-5
        fd1 = (-3 * q(0.0) + 4 * q(h) - q(2 * h)) / (2 * h)
        assert abs(dq - fd1) <= max(1e-4 * abs(fd1), 1e-8)
        h = 1e-4
        fd2 = (2 * q(0.0) - 5 * q(h) + 4 * q(2 * h) - q(3 * h)) / h**2
        assert abs(d2q - fd2) <= max(1e-3 * abs(fd2), 1e-5)


def test_q_curvature_large_n_orthonormal_design():
    # with an orthonormal first stage the curvature limit at alpha=0 reduces
    # to the plain quadratic form prior' (gamma0' rz gamma0) prior
    gamma0 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    prior = np.array([0.5, -0.3])
    spec = ModelSpec(
        n=100_000, k=2, m=3, beta0=np.zeros(2), gamma0=gamma0, prior=prior,
        tau=0.7, err_cov=np.array([[1.0, 0.7, 0.7], [0.7, 1.0, 0.0], [0.7, 0.0, 1.0]]),
        rz=np.eye(3),
    )
    train, test = split(generate_dataset(spec, 13))
    _, d2q = q_derivatives(train, test, 0.0, prior)
    target = prior @ (gamma0.T @ gamma0) @ prior
    assert abs(d2q - target) < 0.05 * target


def test_q_curvature_large_n_benchmark_design():
    # general first stage: the limit is the inverse-weighted quadratic form,
    # 0.75 for this design
    prior = np.array([2**-0.5, 2**-0.5])
    spec = benchmark_spec(1.0, 100_000, prior)
    train, test = split(generate_dataset(spec, 14))
    _, d2q = q_derivatives(train, test, 0.0, prior)
    stilde = spec.gamma0.T @ spec.gamma0
    target = prior @ np.linalg.inv(stilde) @ prior
    assert abs(target - 0.75) < 1e-12
    assert abs(d2q - target) < 0.05 * target


# -- the two-stage search ------------------------------------------------------


def assert_search_matches_oracles(train, test, config, dense_points):
    alpha_hat, trace = select_alpha(train, test, config)
    q_hat = held_out_q(test, ridge_beta(train, alpha_hat, config.prior))

    # same candidate construction, fully independent arithmetic: the winning
    # criterion value must coincide to 1e-12 relative
    alpha_m, q_m, (lo, hi) = oracles.matched_lattice_search(train, test, config)
    assert abs(q_hat - q_m) <= 1e-12 * max(abs(q_hat), abs(q_m))

    # genuinely independent one-stage dense grid: its optimum must land inside
    # the stage-2 bracket, and the selected alpha within one lattice step of it
    alpha_d, _ = oracles.dense_grid_search(
        train, test, config.prior, points=dense_points, cap=config.alpha_infinity
    )
    step = (hi - lo) / (config.linear_grid_points - 1)
    assert lo - 1e-15 <= alpha_d <= hi + 1e-15
    assert abs(alpha_hat - alpha_d) <= step * (1 + 1e-12)
    return alpha_hat, trace


def test_select_alpha_against_oracles():
    for seed in range(8):
        train, test, prior = make_instance(seed + 300)
        assert_search_matches_oracles(
            train, test, RidgeConfig(prior=prior), dense_points=200_000
        )


def test_select_alpha_tiebreak_prefers_zero():
    train, test, _ = make_instance(11)
    prior = tsls(train).beta  # constant path: every alpha ties
    alpha_hat, _ = select_alpha(train, test, RidgeConfig(prior=prior))
    assert alpha_hat == 0.0


def test_select_alpha_never_worse_than_endpoints():
    for seed in range(6):
        train, test, prior = make_instance(seed + 40)
        config = RidgeConfig(prior=prior)
        alpha_hat, trace = select_alpha(train, test, config)
        qs = dict(trace)
        q_hat = held_out_q(test, ridge_beta(train, alpha_hat, prior))
        assert q_hat <= qs[0.0] + 1e-15
        assert q_hat <= qs[config.alpha_infinity] + 1e-15


def test_search_trace_layout():
    train, test, prior = make_instance(12)
    config = RidgeConfig(prior=prior)
    alpha_hat, trace = select_alpha(train, test, config)
    alphas = [a for a, _ in trace]
    assert len(trace) == (config.log_grid_points + 2) + config.linear_grid_points
    assert alphas[0] == 0.0 and alphas[config.log_grid_points + 1] == config.alpha_infinity
    assert alpha_hat in alphas
    _, no_trace = select_alpha(train, test, config, keep_trace=False)
    assert no_trace == ()


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_path_monotone_in_eigencoordinates(seed):
    train, _, prior = make_instance(seed)
    n1 = train.n
    p = oracles.projection_matrix(train.z)
    lam, c = np.linalg.eigh(train.x.T @ p @ train.x / n1)
    alphas = np.concatenate(([0.0], np.logspace(-4, 5, 28)))
    coords = np.abs(
        np.array([c.T @ (ridge_beta(train, a, prior) - prior) for a in alphas])
    )
    drops = np.diff(coords, axis=0)
    assert np.all(drops <= 1e-12)
    # and the exact shrinkage ratio at the first step away from zero
    ratio = lam / (lam + alphas[1])
    np.testing.assert_allclose(coords[1], ratio * coords[0], rtol=1e-8, atol=1e-14)


def test_penalized_inverse_eigenvalues_shrink():
    train, _, _ = make_instance(13)
    g = train.x.T @ oracles.projection_matrix(train.z) @ train.x / train.n
    lam = np.linalg.eigvalsh(g)
    prev = None
    for alpha in (0.0, 0.1, 1.0, 10.0):
        inv_eigs = np.sort(np.linalg.eigvalsh(np.linalg.inv(g + alpha * np.eye(2))))
        np.testing.assert_allclose(inv_eigs, np.sort(1.0 / (lam + alpha)), rtol=1e-10)
        if prev is not None:
            assert np.all(inv_eigs < prev)
        prev = inv_eigs


# -- the full pipeline ---------------------------------------------------------


def test_pipeline_noise_free_recovers_truth():
    data, beta0 = noise_free_data()
    fit = ridge_path_estimate(data, RidgeConfig(prior=np.array([2.0, 2.0])))
    assert fit.alpha_hat == 0.0
    assert fit.regularization_class == "none"
    np.testing.assert_allclose(fit.beta_hat, beta0, rtol=0, atol=1e-10)


def test_pipeline_alpha_zero_equals_training_tsls():
    data = generate_dataset(benchmark_spec(1.0, 60, np.zeros(2)), 21)
    train, _ = split(data)
    prior = tsls(train).beta
    fit = ridge_path_estimate(data, RidgeConfig(prior=prior))
    assert fit.alpha_hat == 0.0
    np.testing.assert_allclose(fit.beta_hat, tsls(train).beta, rtol=1e-12)
    np.testing.assert_allclose(fit.beta_2sls_full, tsls(data).beta, rtol=1e-12)
    np.testing.assert_allclose(fit.cov_2sls, tsls(data).cov, rtol=1e-12)


def test_pipeline_classifies_infinite_regularization():
    # an absurdly attractive prior: make the training signal pure noise so the
    # held-out criterion keeps improving all the way to the cap
    rng = np.random.default_rng(22)
    n = 24
    z = rng.normal(size=(n, 3))
    x = rng.normal(size=(n, 2))  # no first stage at all
    beta = np.array([0.5, -0.25])
    y = rng.normal(size=n)
    data = Dataset(y=y, x=x, z=z, split_at=16)
    config = RidgeConfig(prior=beta)
    fit = ridge_path_estimate(data, config)
    assert fit.regularization_class in {"some", "infinite"}
    if fit.regularization_class == "infinite":
        assert fit.alpha_hat == config.alpha_infinity


def test_singular_training_gram_scores_inf_but_search_continues():
    rng = np.random.default_rng(23)
    n = 40
    z = rng.normal(size=(n, 3))
    u = rng.normal(size=n)
    x1 = z @ np.array([1.0, 0.5, -0.2]) + u
    x = np.column_stack([x1, 2.0 * x1])  # collinear regressors
    y = x1 + rng.normal(size=n)
    data = Dataset(y=y, x=x, z=z, split_at=28)
    train, test = split(data)
    prior = np.array([0.4, 0.2])
    with pytest.raises(SingularDesignError):
        ridge_beta(train, 0.0, prior)
    alpha_hat, trace = select_alpha(train, test, RidgeConfig(prior=prior))
    qs = dict(trace)
    assert qs[0.0] == np.inf  # alpha = 0 is unusable, scored not raised
    assert alpha_hat > 0.0


def test_select_propagates_singular_test_gram():
    # two held-out rows cannot support a rank-3 instrument Gram matrix
    data = generate_dataset(benchmark_spec(1.0, 10, np.zeros(2), tau=0.8), 3)
    train, test = split(data)
    assert test.n == 2
    with pytest.raises(SingularDesignError):
        select_alpha(train, test, RidgeConfig(prior=np.zeros(2)))


def test_refine_alpha_reaches_stationary_point():
    found = 0
    for seed in range(40):
        train, test, prior = make_instance(seed + 700)
        config = RidgeConfig(prior=prior)
        alpha_hat, _ = select_alpha(train, test, config, keep_trace=False)
        if not 0.0 < alpha_hat < config.alpha_infinity:
            continue
        found += 1
        dq_grid, _ = q_derivatives(train, test, alpha_hat, prior)
        refined = refine_alpha(train, test, alpha_hat, prior)
        dq_ref, d2q_ref = q_derivatives(train, test, refined, prior)
        assert abs(dq_ref) <= 1e-10 * max(1.0, abs(d2q_ref))
        assert abs(dq_ref) <= abs(dq_grid)
        if found >= 5:
            break
    assert found >= 5
    # boundary solutions pass through untouched
    train, test, _ = make_instance(11)
    prior = tsls(train).beta
    assert refine_alpha(train, test, 0.0, prior) == 0.0

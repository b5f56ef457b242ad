import numpy as np
from numpy.testing import assert_allclose
import pytest
from scipy.optimize import minimize_scalar

from motionssm.model.config import LearnerConfig
from motionssm.model.core.errors import DivergenceError, PreconditionError
from motionssm.model.core.kalman import forecast, kalman_filter, simulate
from motionssm.model.core.learn import (
    OnlineState,
    ParamVector,
    evaluate_forecast,
    fit_offline,
    loglik_and_grad,
    online_step,
    param_layout,
)
from motionssm.model.lgssm import LgssmParams, ObsSeq
from motionssm.model.serializable import ValidationError
from motionssm.utils.rng import make_rng

from oracles import dense_loglik, random_params


def scalar(A=1.0, Q=0.0, C=1.0, R=1.0, mu0=0.0, Sigma0=0.0):
    return LgssmParams(
        A=[[A]], Q=[[Q]], C=[[C]], R=[[R]], mu0=[mu0], Sigma0=[[Sigma0]]
    )


def finite_difference_grad(params: ParamVector, obs: ObsSeq, h=1e-5):
    grad = np.zeros(params.size)
    for j in range(params.size):
        forward = params.values.copy()
        backward = params.values.copy()
        forward[j] += h
        backward[j] -= h
        f = kalman_filter(params.with_values(forward).to_params(), obs)
        b = kalman_filter(params.with_values(backward).to_params(), obs)
        grad[j] = (f.loglik - b.loglik) / (2 * h)

    return grad


def test_layout_sizes():
    layout = param_layout(3, 2)
    sizes = {k: s.stop - s.start for k, s in layout.items()}
    assert sizes == {
        'A': 9,
        'C': 6,
        'mu0': 3,
        'L_Q': 6,
        'L_R': 3,
        'L_Sigma0': 6,
    }
    assert ParamVector(np.zeros(33), 3, 2).size == 33


def test_wrong_vector_size():
    with pytest.raises(ValidationError):
        ParamVector(np.zeros(5), 3, 2)


def test_pack_unpack_round_trip(rng):
    v = ParamVector(rng.standard_normal(33), 3, 2)
    packed = ParamVector.pack(v.unpack(), 3, 2)
    np.testing.assert_array_equal(packed.values, v.values)


def test_random_vectors_decode_to_psd(rng):
    for _ in range(50):
        v = ParamVector(3 * rng.standard_normal(33), 3, 2)
        params = v.to_params()
        for cov in (params.Q, params.R, params.Sigma0):
            assert np.linalg.eigvalsh(cov).min() >= 0


def test_params_round_trip(small_params):
    v = ParamVector.from_params(small_params)
    params = v.to_params()
    for key in ('A', 'Q', 'C', 'R', 'mu0', 'Sigma0'):
        assert_allclose(getattr(params, key), getattr(small_params, key))


def test_value_equals_filter_loglik(small_params):
    _, x = simulate(small_params, 10, seed=0)
    obs = ObsSeq(x)
    v = ParamVector.from_params(small_params)
    value, _ = loglik_and_grad(v, obs)
    assert value == kalman_filter(v.to_params(), obs).loglik


def test_gradient_zero_at_symmetric_optimum():
    v = ParamVector.from_params(scalar())
    _, grad = loglik_and_grad(v, ObsSeq([0.0]))
    assert_allclose(grad[v.layout['mu0']], 0.0, atol=1e-12)


def test_gradient_matches_finite_differences():
    for seed in range(50):
        rng = make_rng(seed)
        params = random_params(rng, 2, 1)
        _, x = simulate(params, 6, seed=seed)
        observed = np.ones(6, dtype=bool)
        observed[rng.integers(0, 6)] = False
        obs = ObsSeq(x, observed)

        v = ParamVector.from_params(params)
        _, grad = loglik_and_grad(v, obs)
        fd = finite_difference_grad(v, obs)
        assert_allclose(grad, fd, rtol=1e-4, atol=1e-6)


def test_gradient_with_larger_dimensions(rng):
    params = random_params(rng, 3, 2)
    _, x = simulate(params, 8, seed=4)
    obs = ObsSeq(x)
    v = ParamVector.from_params(params)
    _, grad = loglik_and_grad(v, obs)
    assert_allclose(grad, finite_difference_grad(v, obs), rtol=1e-4, atol=1e-6)


def test_doubled_observations_favor_larger_C():
    params = scalar(A=0.8, Q=1.0, R=1.0, Sigma0=1.0)
    _, x = simulate(params, 200, seed=3)

    # Maximize over C on the original data, all else fixed
    def negative_loglik(c):
        return -kalman_filter(params.replace(C=[[c]]), ObsSeq(x)).loglik

    c_star = minimize_scalar(negative_loglik, bounds=(0.1, 3.0)).x
    at_optimum = ParamVector.from_params(params.replace(C=[[c_star]]))
    _, grad = loglik_and_grad(at_optimum, ObsSeq(2 * x))

    C_index = at_optimum.layout['C']
    assert grad[C_index][0] * c_star > 0


def test_fit_empty_dataset(small_params):
    init = ParamVector.from_params(small_params)
    with pytest.raises(ValidationError):
        fit_offline(init, [], LearnerConfig())


def test_fit_dimension_mismatch(small_params):
    init = ParamVector.from_params(small_params)
    with pytest.raises(ValidationError):
        fit_offline(init, [ObsSeq(np.zeros((5, 2)))], LearnerConfig())


def test_fit_zero_iterations(small_params):
    init = ParamVector.from_params(small_params)
    _, x = simulate(small_params, 20, seed=1)
    result = fit_offline(init, [ObsSeq(x)], LearnerConfig(max_iters=0))
    np.testing.assert_array_equal(result.params.values, init.values)
    assert len(result.history) == 1
    assert result.best_iteration == 0


def test_fit_at_truth_barely_moves(small_params):
    data = [
        ObsSeq(simulate(small_params, 100, seed=s)[1]) for s in range(5)
    ]
    init = ParamVector.from_params(small_params)
    cfg = LearnerConfig(max_iters=100, learning_rate=1e-4)
    result = fit_offline(init, data, cfg)

    assert np.all(np.diff(result.history) > -1e-3)
    assert np.all(np.diff(result.best_so_far) >= 0)
    change = np.linalg.norm(result.params.values - init.values)
    assert change < 0.01 * np.linalg.norm(init.values)


def test_fit_is_deterministic(small_params):
    data = [ObsSeq(simulate(small_params, 30, seed=s)[1]) for s in range(2)]
    init = ParamVector.from_params(small_params)
    cfg = LearnerConfig(max_iters=5, learning_rate=0.01)
    a = fit_offline(init, data, cfg)
    b = fit_offline(init, data, cfg)
    np.testing.assert_array_equal(a.params.values, b.params.values)
    np.testing.assert_array_equal(a.history, b.history)


def test_fit_grad_tol_stops_early(small_params):
    init = ParamVector.from_params(small_params)
    _, x = simulate(small_params, 20, seed=1)
    cfg = LearnerConfig(max_iters=10, grad_tol=1e12)
    result = fit_offline(init, [ObsSeq(x)], cfg)
    assert len(result.history) == 1


def test_fit_divergence_names_iteration(small_params, monkeypatch):
    def broken(params, obs):
        return float('nan'), np.zeros(params.size)

    monkeypatch.setattr('motionssm.model.core.learn.loglik_and_grad', broken)
    init = ParamVector.from_params(small_params)
    with pytest.raises(DivergenceError, match='iteration 0'):
        fit_offline(init, [ObsSeq(np.zeros((4, 1)))], LearnerConfig())


def test_fit_overflowing_iterate_is_divergence(small_params):
    # Residuals far above R push its log-diagonal up by the step size
    obs = ObsSeq(np.full((10, 1), 50.0))
    init = ParamVector.from_params(small_params)
    cfg = LearnerConfig(max_iters=5, learning_rate=1000.0)
    with pytest.raises(DivergenceError, match='iteration 1') as excinfo:
        fit_offline(init, [obs], cfg)

    assert np.isnan(excinfo.value.value)


@pytest.mark.slow
def test_fit_recovers_transition():
    truth = scalar(A=0.8, Q=1.0, R=1.0, Sigma0=1.0)
    _, x = simulate(truth, 2000, seed=12)
    init = ParamVector.from_params(truth.replace(A=[[0.1]]))
    cfg = LearnerConfig(max_iters=300, learning_rate=0.02)
    result = fit_offline(init, [ObsSeq(x)], cfg)
    assert abs(result.params.to_params().A[0, 0] - 0.8) < 0.05


def test_online_frozen_keeps_params(small_params):
    cfg = LearnerConfig(horizon=5, inner_steps_per_sample=0)
    state = OnlineState.start(ParamVector.from_params(small_params), cfg)
    before = state.params.values.copy()
    _, x = simulate(small_params, 8, seed=2)
    for row in x:
        online_step(state, row)

    np.testing.assert_array_equal(state.params.values, before)
    assert state.step == 8
    assert len(state.buffer) == 5
    assert len(state.loglik_log) == 8


def test_online_window_semantics(small_params):
    cfg = LearnerConfig(horizon=4)
    state = OnlineState.start(ParamVector.from_params(small_params), cfg)
    _, x = simulate(small_params, 7, seed=3)
    for k, row in enumerate(x, start=1):
        online_step(state, row)
        window = state.window()
        assert len(window) == min(k, 4)
        assert_allclose(window.values, x[max(0, k - 4) : k])
        assert window.t0_index == max(0, k - 4)


def test_online_first_loglik_is_window_loglik(small_params):
    cfg = LearnerConfig(horizon=3)
    v = ParamVector.from_params(small_params)
    state = OnlineState.start(v, cfg)
    _, x = simulate(small_params, 2, seed=3)
    online_step(state, x[0])
    expected = kalman_filter(small_params, ObsSeq(x[:1])).loglik
    assert_allclose(state.loglik_log[0], expected, rtol=1e-10)

    # Adam moments persist across steps
    online_step(state, x[1])
    assert state.optimizer.num_steps == 2
    moved = state.candidate.values != v.values
    assert np.any(moved)
    assert np.all(moved <= state.mask)

    # Published params wait for evidence
    np.testing.assert_array_equal(state.params.values, v.values)
    assert state.num_switches == 0


def test_online_missing_and_bad_observations(small_params):
    cfg = LearnerConfig(horizon=3)
    state = OnlineState.start(ParamVector.from_params(small_params), cfg)
    online_step(state, [np.nan])
    assert state.window().n_observed == 0
    assert state.loglik_log[0] == 0

    with pytest.raises(ValidationError):
        online_step(state, [1.0, 2.0])


def test_online_is_deterministic(small_params):
    _, x = simulate(small_params, 10, seed=5)

    def run():
        cfg = LearnerConfig(horizon=4, inner_steps_per_sample=2)
        state = OnlineState.start(ParamVector.from_params(small_params), cfg)
        for row in x:
            online_step(state, row)

        return state

    a, b = run(), run()
    np.testing.assert_array_equal(a.params.values, b.params.values)
    np.testing.assert_array_equal(a.candidate.values, b.candidate.values)
    assert a.loglik_log == b.loglik_log


def test_online_publishes_after_a_regime_change():
    truth = scalar(A=0.95, Q=0.1, R=0.01, Sigma0=1.0)
    init = ParamVector.from_params(truth.replace(A=[[0.0]]))
    _, x = simulate(truth, 300, seed=8)

    cfg = LearnerConfig(horizon=20, learning_rate=0.01)
    state = OnlineState.start(init, cfg)
    for row in x:
        online_step(state, row)

    assert state.num_switches >= 1
    assert state.params.to_params().A[0, 0] > 0.5
    # Only the transition block is adapted by default
    layout = state.params.layout
    np.testing.assert_array_equal(
        state.params.values[layout['A'].stop :],
        init.values[layout['A'].stop :],
    )

    # Without enough evidence nothing is published
    strict = OnlineState.start(init, cfg.replace(switch_threshold=1e9))
    for row in x:
        online_step(strict, row)

    assert strict.num_switches == 0
    np.testing.assert_array_equal(strict.params.values, init.values)
    assert strict.candidate.values[0] > 0.5


def test_online_stationary_stream_keeps_published_params(small_params):
    v = ParamVector.from_params(small_params)
    state = OnlineState.start(v, LearnerConfig(horizon=20))
    _, x = simulate(small_params, 150, seed=4)
    for row in x:
        online_step(state, row)

    assert state.num_switches == 0
    np.testing.assert_array_equal(state.params.values, v.values)


def test_online_overflowing_candidate_is_divergence(small_params):
    cfg = LearnerConfig(
        horizon=5, learning_rate=1000.0, adapt_transition_only=False
    )
    state = OnlineState.start(ParamVector.from_params(small_params), cfg)
    online_step(state, [50.0])
    with pytest.raises(DivergenceError, match='iteration 1'):
        online_step(state, [50.0])


@pytest.mark.slow
def test_online_stationary_stream_matches_frozen(small_params):
    _, x = simulate(small_params, 550, seed=21)
    state = OnlineState.start(
        ParamVector.from_params(small_params), LearnerConfig()
    )
    for row in x[:500]:
        online_step(state, row)

    past = ObsSeq(x[425:500])
    future = ObsSeq(x[500:])
    adapted = evaluate_forecast(state.params.to_params(), past, future)
    frozen = evaluate_forecast(small_params, past, future)
    assert state.num_switches == 0
    assert_allclose(adapted.loglik, frozen.loglik, rtol=1e-8)
    assert_allclose(adapted.rmse, frozen.rmse, rtol=1e-8)


def test_forecast_score_unit_example():
    params = scalar()
    score = evaluate_forecast(params, ObsSeq([0.0]), ObsSeq([0.0]))
    assert_allclose(score.loglik, -0.5 * np.log(2 * np.pi), atol=1e-12)
    assert score.rmse == 0


def test_forecast_score_at_predictive_means(small_params):
    _, x = simulate(small_params, 10, seed=6)
    past = ObsSeq(x)
    last = kalman_filter(small_params, past).filtered[9]
    means = forecast(small_params, last, 5).observations.means
    score = evaluate_forecast(small_params, past, ObsSeq(means))
    assert_allclose(score.rmse, 0.0, atol=1e-12)


def test_forecast_score_matches_dense_conditional():
    for seed in range(20):
        rng = make_rng(seed)
        params = random_params(rng, 2, 2)
        _, x = simulate(params, 7, seed=seed)
        past, future = ObsSeq(x[:4]), ObsSeq(x[4:])
        score = evaluate_forecast(params, past, future)
        expected = dense_loglik(params, ObsSeq(x)) - dense_loglik(
            params, past
        )
        assert_allclose(score.loglik, expected, atol=1e-8)


def test_forecast_score_edge_cases(small_params):
    with pytest.raises(PreconditionError):
        evaluate_forecast(
            small_params, ObsSeq(np.zeros((3, 1))), ObsSeq(np.zeros((0, 1)))
        )

    unobserved = ObsSeq(np.zeros((2, 1)), observed=[False, False])
    score = evaluate_forecast(small_params, ObsSeq([0.1]), unobserved)
    assert score.loglik == 0
    assert np.isnan(score.rmse)


def test_forecast_score_monte_carlo(small_params):
    _, x = simulate(small_params, 30, seed=6)
    past, future = ObsSeq(x[:20]), ObsSeq(x[20:])
    a = evaluate_forecast(small_params, past, future, n_samples=50, seed=1)
    b = evaluate_forecast(small_params, past, future, n_samples=50, seed=1)
    mean_mode = evaluate_forecast(small_params, past, future)
    assert a == b
    assert a.loglik == mean_mode.loglik
    # Sampled paths add the predictive spread to the error
    assert a.rmse > mean_mode.rmse

import numpy as np
from numpy.testing import assert_allclose
import pytest

from motionssm.model.config import LearnerConfig
from motionssm.model.core.deform import exp_svf
from motionssm.model.core.elbo import (
    BasisWarpDecoder,
    LinearEncoder,
    LinearStandIn,
    elbo_estimate,
    joint_fit,
    latent_term,
    latent_term_monte_carlo,
)
from motionssm.model.core.errors import DivergenceError
from motionssm.model.core.kalman import kalman_filter, simulate
from motionssm.model.frames import Frame, FrameSeq
from motionssm.model.lgssm import ObsSeq
from motionssm.model.serializable import ValidationError
from motionssm.utils.rng import make_rng

from oracles import dense_loglik

W = np.array([[1.0], [0.5], [-0.3], [2.0]])
REFERENCE = Frame(np.array([[0.2, -0.1], [0.4, 0.0]]))


def stand_in(R_y_var: float) -> LinearStandIn:
    return LinearStandIn(W, R_y_var * np.eye(4), (2, 2))


def test_stand_in_evidence_matches_dense_oracle(small_params):
    model = stand_in(0.05)
    _, seq = model.sample(small_params, REFERENCE, 4, seed=2)
    residuals = seq.frames.reshape(4, -1) - np.ravel(REFERENCE.image)
    expected = dense_loglik(
        model.composed_lgssm(small_params), ObsSeq(residuals)
    )
    assert_allclose(
        model.exact_log_evidence(small_params, REFERENCE, seq),
        expected,
        atol=1e-8,
    )


def test_exact_encoder_is_tight(small_params):
    model = stand_in(1e-8)
    _, seq = model.sample(small_params, REFERENCE, 3, seed=0)
    estimate = elbo_estimate(
        model.exact_encoder(),
        model.decoder(),
        small_params,
        REFERENCE,
        seq,
        n_samples=10_000,
    )
    evidence = model.exact_log_evidence(small_params, REFERENCE, seq)
    assert abs(estimate.value - evidence) <= 3 * estimate.std_error + 1e-6


def test_widened_encoder_is_loose(small_params):
    model = stand_in(1e-8)
    _, seq = model.sample(small_params, REFERENCE, 3, seed=0)
    estimate = elbo_estimate(
        model.exact_encoder(cov_scale=4.0),
        model.decoder(),
        small_params,
        REFERENCE,
        seq,
        n_samples=10_000,
    )
    evidence = model.exact_log_evidence(small_params, REFERENCE, seq)
    assert estimate.value < evidence - 3 * estimate.std_error


def test_bound_holds_for_arbitrary_encoders(small_params):
    model = stand_in(0.05)
    _, seq = model.sample(small_params, REFERENCE, 3, seed=1)
    evidence = model.exact_log_evidence(small_params, REFERENCE, seq)
    for seed in range(5):
        rng = make_rng(seed)
        encoder = LinearEncoder(
            rng.standard_normal((1, 4)), [[rng.uniform(0.05, 1.0)]]
        )
        estimate = elbo_estimate(
            encoder,
            model.decoder(),
            small_params,
            REFERENCE,
            seq,
            n_samples=2000,
            seed=seed,
        )
        assert estimate.value <= evidence + 3 * estimate.std_error


def test_estimate_breakdown_and_determinism(small_params, monkeypatch):
    model = stand_in(0.05)
    _, seq = model.sample(small_params, REFERENCE, 3, seed=1)
    args = (model.exact_encoder(), model.decoder(), small_params)

    # Spans more than one sample chunk
    a = elbo_estimate(*args, REFERENCE, seq, n_samples=300, seed=7)
    monkeypatch.setenv('MOTIONSSM_THREADS', '1')
    b = elbo_estimate(*args, REFERENCE, seq, n_samples=300, seed=7)
    c = elbo_estimate(*args, REFERENCE, seq, n_samples=300, seed=8)

    assert a == b
    assert a.value != c.value
    assert a.n_samples == 300
    assert_allclose(a.value, a.reconstruction + a.latent + a.entropy)


def test_estimate_validation(small_params):
    model = stand_in(0.05)
    _, seq = model.sample(small_params, REFERENCE, 2, seed=1)
    args = (model.exact_encoder(), model.decoder(), small_params, REFERENCE)
    with pytest.raises(ValidationError):
        elbo_estimate(*args, seq, n_samples=0)

    wide = LinearEncoder(np.zeros((2, 4)), np.eye(2))
    with pytest.raises(ValidationError):
        elbo_estimate(
            wide, model.decoder(), small_params, REFERENCE, seq, 10
        )


def test_latent_term_analytic_equals_filter(small_params):
    _, x = simulate(small_params, 12, seed=3)
    obs = ObsSeq(x)
    assert latent_term(small_params, obs) == (
        kalman_filter(small_params, obs).loglik
    )


def test_latent_term_monte_carlo_agrees(small_params):
    _, x = simulate(small_params, 12, seed=3)
    obs = ObsSeq(x)
    analytic = latent_term(small_params, obs)
    value, std_error = latent_term_monte_carlo(
        small_params, obs, n_samples=10_000, seed=0
    )
    # Every draw gives log p(x) up to rounding, so allow a small floor
    assert abs(value - analytic) <= max(4 * std_error, 1e-8)

    assert latent_term(
        small_params, obs, mode='monte_carlo', n_samples=100
    ) == pytest.approx(analytic, abs=1e-8)


def test_latent_term_validation(small_params):
    with pytest.raises(ValidationError):
        latent_term(small_params, ObsSeq([[0.0], [1.0]], [True, False]))

    with pytest.raises(ValidationError):
        latent_term(small_params, ObsSeq([0.0]), mode='variational')


def test_latent_term_near_deterministic_limit(small_params):
    tiny = 1e-12 * np.eye(2)
    params = small_params.replace(Q=tiny, R=[[1e-12]], Sigma0=tiny)
    _, x = simulate(params, 12, seed=3)
    value = latent_term(params, ObsSeq(x))
    assert np.isfinite(value)
    # A nearly noiseless path has a sharply peaked density
    assert value > 0


def test_linear_encoder_parameters_round_trip(rng):
    encoder = LinearEncoder(
        rng.standard_normal((2, 4)), [[0.5, 0.0], [0.2, 1.5]]
    )
    restored = encoder.with_parameters(encoder.parameters())
    assert_allclose(restored.gain, encoder.gain)
    assert_allclose(restored.cov, encoder.cov)


def test_invalid_encoder_and_stand_in():
    with pytest.raises(ValidationError):
        LinearEncoder(np.zeros((1, 4)), [[0.0]])

    with pytest.raises(ValidationError):
        LinearStandIn(np.zeros((4, 1)), np.eye(4), (2, 2))

    with pytest.raises(ValidationError):
        LinearStandIn(W, np.eye(4), (3, 3))


def test_basis_warp_decoder_zero_motion():
    rng = make_rng(0)
    image = rng.uniform(size=(8, 8))
    basis = rng.standard_normal((2, 8, 8, 2))
    decoder = BasisWarpDecoder(basis, noise_var=0.01)

    s = decoder.feature_extract(Frame(image))
    assert_allclose(decoder.decode(np.zeros(2), s), image, atol=1e-12)

    expected = -0.5 * image.size * (np.log(2 * np.pi) + np.log(0.01))
    assert_allclose(
        decoder.log_likelihood(image, np.zeros(2), s), expected
    )
    assert_allclose(
        decoder.deformation(np.zeros(2)), exp_svf(np.zeros((8, 8, 2)))
    )

    restored = decoder.with_parameters(decoder.parameters())
    assert_allclose(restored.noise_var, 0.01)

    with pytest.raises(ValidationError):
        BasisWarpDecoder(basis, noise_var=0.0)

    with pytest.raises(ValidationError):
        BasisWarpDecoder(basis[0], noise_var=0.01)


def test_joint_fit_empty_dataset(small_params):
    model = stand_in(0.05)
    with pytest.raises(ValidationError):
        joint_fit(
            model.exact_encoder(),
            model.decoder(),
            small_params,
            [],
            LearnerConfig(),
        )


def test_joint_fit_improves_perturbed_decoder(small_params):
    model = stand_in(0.05)
    dataset = [
        model.sample(small_params, REFERENCE, 20, seed=s)[1] for s in range(2)
    ]
    perturbed = LinearStandIn(1.5 * W, model.R_y, (2, 2))
    encoder = perturbed.exact_encoder()
    decoder = perturbed.decoder()

    def mean_elbo(enc, dec, lgssm):
        estimates = [
            elbo_estimate(enc, dec, lgssm, seq.reference, seq, 512, seed=3)
            for seq in dataset
        ]
        return np.mean([e.value for e in estimates])

    before = mean_elbo(encoder, decoder, small_params)
    cfg = LearnerConfig(max_iters=30, learning_rate=0.01)
    result = joint_fit(encoder, decoder, small_params, dataset, cfg)
    after = mean_elbo(result.encoder, result.decoder, result.lgssm)

    assert len(result.history) == 31
    assert after > before


def test_joint_fit_is_deterministic(small_params):
    model = stand_in(0.05)
    seq = model.sample(small_params, REFERENCE, 5, seed=4)[1]
    cfg = LearnerConfig(max_iters=3, learning_rate=0.01, seed=2)

    def run():
        return joint_fit(
            model.exact_encoder(), model.decoder(), small_params, [seq], cfg
        )

    a, b = run(), run()
    np.testing.assert_array_equal(a.history, b.history)
    np.testing.assert_array_equal(a.decoder.W, b.decoder.W)


def test_joint_fit_at_truth_stays_within_noise(small_params):
    model = stand_in(0.05)
    dataset = [
        model.sample(small_params, REFERENCE, 20, seed=s)[1] for s in range(2)
    ]

    def estimates(enc, dec, lgssm):
        return [
            elbo_estimate(enc, dec, lgssm, seq.reference, seq, 1024, seed=5)
            for seq in dataset
        ]

    encoder, decoder = model.exact_encoder(), model.decoder()
    before = estimates(encoder, decoder, small_params)
    cfg = LearnerConfig(max_iters=50, learning_rate=1e-4)
    result = joint_fit(encoder, decoder, small_params, dataset, cfg)
    after = estimates(result.encoder, result.decoder, result.lgssm)

    assert np.all(np.isfinite(result.history))
    for b, a in zip(before, after):
        band = 4 * np.hypot(b.std_error, a.std_error)
        assert abs(a.value - b.value) <= band


def test_joint_fit_overflowing_iterate_is_divergence(small_params):
    model = stand_in(0.05)
    _, seq = model.sample(small_params, REFERENCE, 6, seed=4)
    # Offset frames the LG-SSM cannot explain push its R up
    far = FrameSeq(seq.frames + 50.0, seq.reference)
    cfg = LearnerConfig(max_iters=3, learning_rate=1000.0)
    with pytest.raises(DivergenceError, match='iteration 1'):
        joint_fit(
            model.exact_encoder(), model.decoder(), small_params, [far], cfg
        )

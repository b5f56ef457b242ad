"""Exact inference for the linear Gaussian state-space model

All functions are pure: they only read their inputs and allocate new
outputs, so they can be called concurrently from several threads.
"""

import logging

import numpy as np

from motionssm.model.core.errors import PreconditionError
from motionssm.model.core.linalg import (
    cholesky_with_jitter,
    psd_sqrt,
    symmetrize,
)
from motionssm.model.lgssm import (
    FilterResult,
    ForecastResult,
    Gaussian,
    GaussianSeq,
    LgssmParams,
    ObsSeq,
    SmoothResult,
    observation_marginals,
)
from motionssm.model.serializable import ValidationError
from motionssm.utils.rng import STREAM_POSTERIOR, STREAM_SIMULATE, make_rng

logger = logging.getLogger(__name__)


def _check_obs(params: LgssmParams, obs: ObsSeq):
    if obs.d_x != params.d_x:
        msg = (
            f'Observation dimension {obs.d_x} does not match the model '
            f'observation dimension {params.d_x}'
        )
        raise ValidationError(msg)

    if len(obs) < 1:
        raise ValidationError('At least one time step is required')


def kalman_filter(params: LgssmParams, obs: ObsSeq) -> FilterResult:
    """Forward filtering pass

    Missing steps skip the update (filtered equals predicted) and
    contribute nothing to the log-likelihood. Covariances are updated in
    Joseph form and re-symmetrized after every step.
    """
    _check_obs(params, obs)

    A, Q, C, R = params.A, params.Q, params.C, params.R
    T, d_z = len(obs), params.d_z
    eye = np.eye(d_z)

    predicted = GaussianSeq.empty(T, d_z)
    filtered = GaussianSeq.empty(T, d_z)
    per_step = np.zeros(T)

    m, P = params.mu0, params.Sigma0
    for t in range(T):
        m = A @ m
        P = symmetrize(A @ P @ A.T + Q)
        predicted.means[t] = m
        predicted.covs[t] = P

        if obs.observed[t]:
            residual = obs.values[t] - C @ m
            PCt = P @ C.T
            S = symmetrize(C @ PCt + R)
            factor = cholesky_with_jitter(S, 'Innovation covariance', t)
            K = factor.solve(PCt.T).T
            m = m + K @ residual
            IKC = eye - K @ C
            P = symmetrize(IKC @ P @ IKC.T + K @ R @ K.T)
            per_step[t] = factor.logpdf(residual)

        filtered.means[t] = m
        filtered.covs[t] = P

    return FilterResult(predicted, filtered, per_step)


def rts_smooth(params: LgssmParams, filt: FilterResult) -> SmoothResult:
    """Backward Rauch-Tung-Striebel pass over a filter result"""
    A = params.A
    T, d_z = len(filt.filtered), params.d_z

    means = filt.filtered.means.copy()
    covs = filt.filtered.covs.copy()
    pairwise = np.zeros((max(T - 1, 0), d_z, d_z))
    gains = np.zeros((max(T - 1, 0), d_z, d_z))

    for t in range(T - 2, -1, -1):
        P_f = filt.filtered.covs[t]
        P_pred = filt.predicted.covs[t + 1]
        factor = cholesky_with_jitter(
            P_pred, 'Predicted covariance', t + 1
        )
        # J = P_f A^T P_pred^{-1}, using the symmetry of both covariances
        J = factor.solve(A @ P_f).T
        means[t] = filt.filtered.means[t] + J @ (
            means[t + 1] - filt.predicted.means[t + 1]
        )
        covs[t] = symmetrize(P_f + J @ (covs[t + 1] - P_pred) @ J.T)
        pairwise[t] = covs[t + 1] @ J.T
        gains[t] = J

    return SmoothResult(GaussianSeq(means, covs), pairwise, gains)


def forecast(
    params: LgssmParams, last_filtered: Gaussian, k: int
) -> ForecastResult:
    """Predict k steps ahead of a filtered belief, without updates"""
    if k < 1:
        raise ValidationError(f'Forecast length must be >= 1, got {k}')

    if last_filtered.dim != params.d_z:
        msg = (
            f'Belief dimension {last_filtered.dim} does not match the model '
            f'state dimension {params.d_z}'
        )
        raise ValidationError(msg)

    A, Q = params.A, params.Q
    states = GaussianSeq.empty(k, params.d_z)
    m, P = last_filtered.mean, last_filtered.cov
    for j in range(k):
        m = A @ m
        P = symmetrize(A @ P @ A.T + Q)
        states.means[j] = m
        states.covs[j] = P

    return ForecastResult(states, observation_marginals(params, states))


def impute(params: LgssmParams, obs: ObsSeq) -> GaussianSeq:
    """Smoothed predictive distributions of x_t at every step"""
    if obs.n_observed == 0:
        raise PreconditionError('Imputation needs at least one observed step')

    smoothed = rts_smooth(params, kalman_filter(params, obs)).smoothed
    return observation_marginals(params, smoothed)


def simulate(
    params: LgssmParams,
    T: int,
    seed: int,
    initial_state: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling of (z_{1:T}, x_{1:T})

    If `initial_state` is given, it is used as z_0 in place of a draw
    from N(mu0, Sigma0). This continues a trajectory across a change of
    parameters.
    """
    if T < 1:
        raise ValidationError(f'T must be >= 1, got {T}')

    rng = make_rng(seed, STREAM_SIMULATE)
    sqrt_Q = psd_sqrt(params.Q, 'Q')
    sqrt_R = psd_sqrt(params.R, 'R')

    # Draw all noise up front so the stream layout is independent of
    # the dimensions of the intermediate products.
    eps_0 = rng.standard_normal(params.d_z)
    eps_z = rng.standard_normal((T, params.d_z))
    eps_x = rng.standard_normal((T, params.d_x))

    if initial_state is None:
        z = params.mu0 + psd_sqrt(params.Sigma0, 'Sigma0') @ eps_0
    else:
        z = np.asarray(initial_state, dtype=np.float64)

    latents = np.empty((T, params.d_z))
    observations = np.empty((T, params.d_x))
    for t in range(T):
        z = params.A @ z + sqrt_Q @ eps_z[t]
        latents[t] = z
        observations[t] = params.C @ z + sqrt_R @ eps_x[t]

    return latents, observations


def sample_posterior(
    params: LgssmParams,
    obs: ObsSeq,
    n_samples: int,
    seed: int,
    filt: FilterResult | None = None,
    smooth: SmoothResult | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw z_{1:T} ~ p(z | x) by forward filtering, backward sampling

    Returns the (n_samples, T, d_z) draws and the posterior log-density
    of each draw.
    """
    if n_samples < 1:
        raise ValidationError(f'n_samples must be >= 1, got {n_samples}')

    if filt is None:
        filt = kalman_filter(params, obs)

    if smooth is None:
        smooth = rts_smooth(params, filt)

    T, d_z = len(obs), params.d_z
    rng = make_rng(seed, STREAM_POSTERIOR)
    eps = rng.standard_normal((n_samples, T, d_z))

    # Backward kernels p(z_t | z_{t+1}, x_{1:t}) have covariance
    # P_t - J_t P_{t+1|t} J_t^T, which does not depend on the sample.
    kernels = [
        cholesky_with_jitter(filt.filtered.covs[-1], 'Filtered covariance')
    ]
    for t in range(T - 2, -1, -1):
        J = smooth.gains[t]
        cov = symmetrize(
            filt.filtered.covs[t] - J @ filt.predicted.covs[t + 1] @ J.T
        )
        kernels.append(cholesky_with_jitter(cov, 'Backward kernel', t))

    kernels = kernels[::-1]

    draws = np.empty((n_samples, T, d_z))
    logpdf = np.zeros(n_samples)
    for i in range(n_samples):
        mean = filt.filtered.means[-1]
        for t in range(T - 1, -1, -1):
            if t < T - 1:
                J = smooth.gains[t]
                mean = filt.filtered.means[t] + J @ (
                    draws[i, t + 1] - filt.predicted.means[t + 1]
                )

            factor = kernels[t]
            draws[i, t] = mean + factor.lower @ eps[i, t]
            logpdf[i] += factor.logpdf(draws[i, t] - mean)

    return draws, logpdf


def complete_data_logpdf(
    params: LgssmParams, obs: ObsSeq, z: np.ndarray
) -> float:
    """log p(x_observed, z_{1:T}) with z_0 marginalized out"""
    A, Q, C, R = params.A, params.Q, params.C, params.R
    P1 = symmetrize(A @ params.Sigma0 @ A.T + Q)

    total = cholesky_with_jitter(P1, 'Initial covariance').logpdf(
        z[0] - A @ params.mu0
    )
    if len(z) > 1:
        Q_factor = cholesky_with_jitter(Q, 'Q')
        for t in range(1, len(z)):
            total += Q_factor.logpdf(z[t] - A @ z[t - 1])

    R_factor = cholesky_with_jitter(R, 'R')
    for t in np.flatnonzero(obs.observed):
        total += R_factor.logpdf(obs.values[t] - C @ z[t])

    return float(total)

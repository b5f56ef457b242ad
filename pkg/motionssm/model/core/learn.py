"""Maximum-likelihood learning of LG-SSM parameters

Gradients of the exact marginal log-likelihood are computed with
Fisher's identity,

    grad log p(x) = E_{p(z | x)}[grad log p(x, z)],

from the RTS smoother statistics. They are then chain-ruled into an
unconstrained flat vector in which the covariances are stored as
lower-triangular Cholesky factors with log-transformed diagonals.
"""

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
import logging
from typing import NamedTuple

import numpy as np

from motionssm.model.config import LearnerConfig
from motionssm.model.core.errors import (
    DivergenceError,
    NumericalError,
    PreconditionError,
)
from motionssm.model.core.kalman import forecast, kalman_filter, rts_smooth
from motionssm.model.core.linalg import (
    cholesky_with_jitter,
    psd_sqrt,
    symmetrize,
)
from motionssm.model.core.metrics import rmse
from motionssm.model.lgssm import (
    FilterResult,
    Gaussian,
    LgssmParams,
    ObsSeq,
    SmoothResult,
)
from motionssm.model.serializable import ValidationError
from motionssm.utils.parallel import ordered_map
from motionssm.utils.rng import STREAM_FORECAST, make_rng

logger = logging.getLogger(__name__)

# Triangular blocks of the packed vector and the covariance each encodes
TRIANGULAR_BLOCKS = {
    'L_Q': 'Q',
    'L_R': 'R',
    'L_Sigma0': 'Sigma0',
}


@lru_cache(maxsize=None)
def param_layout(d_z: int, d_x: int) -> dict[str, slice]:
    """Index map of the packed parameter vector

    Order: A (row-major), C (row-major), mu0, then the lower triangles of
    L_Q, L_R and L_Sigma0 in `numpy.tril_indices` order.
    """
    sizes = {
        'A': d_z * d_z,
        'C': d_x * d_z,
        'mu0': d_z,
        'L_Q': d_z * (d_z + 1) // 2,
        'L_R': d_x * (d_x + 1) // 2,
        'L_Sigma0': d_z * (d_z + 1) // 2,
    }
    layout = {}
    start = 0
    for name, size in sizes.items():
        layout[name] = slice(start, start + size)
        start += size

    return layout


def _block_dim(name: str, d_z: int, d_x: int) -> int:
    return d_x if name == 'L_R' else d_z


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    d_z: int
    d_x: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != self.size:
            msg = (
                f'Parameter vector has {values.size} entries, expected '
                f'{self.size} for d_z={self.d_z}, d_x={self.d_x}'
            )
            raise ValidationError(msg)

        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def layout(self) -> dict[str, slice]:
        return param_layout(self.d_z, self.d_x)

    @property
    def size(self) -> int:
        return param_layout(self.d_z, self.d_x)['L_Sigma0'].stop

    def with_values(self, values: np.ndarray) -> 'ParamVector':
        return ParamVector(values, self.d_z, self.d_x)

    def unpack(self) -> dict[str, np.ndarray]:
        """Raw blocks. Triangular blocks keep their log diagonals."""
        layout = self.layout
        blocks = {
            'A': self.values[layout['A']].reshape(self.d_z, self.d_z),
            'C': self.values[layout['C']].reshape(self.d_x, self.d_z),
            'mu0': self.values[layout['mu0']].copy(),
        }
        for name in TRIANGULAR_BLOCKS:
            d = _block_dim(name, self.d_z, self.d_x)
            raw = np.zeros((d, d))
            raw[np.tril_indices(d)] = self.values[layout[name]]
            blocks[name] = raw

        return blocks

    @classmethod
    def pack(
        cls, blocks: dict[str, np.ndarray], d_z: int, d_x: int
    ) -> 'ParamVector':
        layout = param_layout(d_z, d_x)
        values = np.empty(layout['L_Sigma0'].stop)
        values[layout['A']] = np.ravel(blocks['A'])
        values[layout['C']] = np.ravel(blocks['C'])
        values[layout['mu0']] = np.ravel(blocks['mu0'])
        for name in TRIANGULAR_BLOCKS:
            d = _block_dim(name, d_z, d_x)
            values[layout[name]] = np.asarray(blocks[name])[
                np.tril_indices(d)
            ]

        return cls(values, d_z, d_x)

    def factors(self) -> dict[str, np.ndarray]:
        """Cholesky factors keyed by covariance name"""
        blocks = self.unpack()
        out = {}
        for name, cov_name in TRIANGULAR_BLOCKS.items():
            L = blocks[name]
            np.fill_diagonal(L, np.exp(np.diag(L)))
            out[cov_name] = L

        return out

    def to_params(self) -> LgssmParams:
        blocks = self.unpack()
        covs = {k: symmetrize(L @ L.T) for k, L in self.factors().items()}
        return LgssmParams(
            A=blocks['A'],
            C=blocks['C'],
            mu0=blocks['mu0'],
            **covs,
        )

    @classmethod
    def from_params(cls, params: LgssmParams) -> 'ParamVector':
        """Encode params. Singular covariances receive a tiny jitter."""
        blocks = {'A': params.A, 'C': params.C, 'mu0': params.mu0}
        for name, cov_name in TRIANGULAR_BLOCKS.items():
            cov = getattr(params, cov_name)
            L = cholesky_with_jitter(cov, cov_name).lower.copy()
            np.fill_diagonal(L, np.log(np.diag(L)))
            blocks[name] = L

        return cls.pack(blocks, params.d_z, params.d_x)

    def chain_rule(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Map gradients wrt (A, C, mu0, Q, R, Sigma0) to the raw vector"""
        layout = self.layout
        out = np.empty(self.size)
        out[layout['A']] = grads['A'].ravel()
        out[layout['C']] = grads['C'].ravel()
        out[layout['mu0']] = grads['mu0']

        factors = self.factors()
        for name, cov_name in TRIANGULAR_BLOCKS.items():
            L = factors[cov_name]
            # d/dL of f(L L^T) is 2 G L for a symmetric gradient G
            dL = 2 * symmetrize(grads[cov_name]) @ L
            rows, cols = np.tril_indices(L.shape[0])
            g = dL[rows, cols]
            diagonal = rows == cols
            # Diagonals are stored as log(L_ii)
            g[diagonal] *= L[rows[diagonal], cols[diagonal]]
            out[layout[name]] = g

        return out


def expected_loglik_gradients(
    params: LgssmParams, obs: ObsSeq, smooth: SmoothResult
) -> dict[str, np.ndarray]:
    """Gradients of E_{p(z|x)}[log p(x, z)] wrt the natural parameters

    Covariance gradients are the symmetric matrices G with
    d(objective) = trace(G dSigma).
    """
    A, Q, C, R = params.A, params.Q, params.C, params.R
    mu0, Sigma0 = params.mu0, params.Sigma0
    m = smooth.smoothed.means
    P = smooth.smoothed.covs
    T = len(obs)

    # z_1 ~ N(A mu0, A Sigma0 A^T + Q) once z_0 is integrated out
    a = A @ mu0
    P1 = symmetrize(A @ Sigma0 @ A.T + Q)
    P1_factor = cholesky_with_jitter(P1, 'Initial predicted covariance')
    P1_inv = P1_factor.inverse()
    d1 = m[0] - a
    g_a = P1_factor.solve(d1)
    G1 = 0.5 * P1_inv @ (P[0] + np.outer(d1, d1) - P1) @ P1_inv

    grad_mu0 = A.T @ g_a
    grad_A = np.outer(g_a, mu0) + 2 * G1 @ A @ Sigma0
    grad_Sigma0 = A.T @ G1 @ A
    grad_Q = G1.copy()

    second_moments = P + np.einsum('ti,tj->tij', m, m)
    if T > 1:
        S11 = second_moments[1:].sum(axis=0)
        S00 = second_moments[:-1].sum(axis=0)
        S10 = (
            smooth.pairwise_cov + np.einsum('ti,tj->tij', m[1:], m[:-1])
        ).sum(axis=0)
        Q_inv = cholesky_with_jitter(Q, 'Q').inverse()
        W = S11 - A @ S10.T - S10 @ A.T + A @ S00 @ A.T
        grad_A += Q_inv @ (S10 - A @ S00)
        grad_Q += 0.5 * Q_inv @ (W - (T - 1) * Q) @ Q_inv

    grad_C = np.zeros_like(C)
    grad_R = np.zeros_like(R)
    observed = np.flatnonzero(obs.observed)
    if observed.size:
        X = obs.values[observed]
        M = m[observed]
        R_inv = cholesky_with_jitter(R, 'R').inverse()
        grad_C = R_inv @ (X.T @ M - C @ second_moments[observed].sum(axis=0))
        residuals = X - M @ C.T
        expected = residuals.T @ residuals + C @ P[observed].sum(axis=0) @ C.T
        grad_R = 0.5 * R_inv @ (expected - observed.size * R) @ R_inv

    return {
        'A': grad_A,
        'C': grad_C,
        'mu0': grad_mu0,
        'Q': symmetrize(grad_Q),
        'R': symmetrize(grad_R),
        'Sigma0': symmetrize(grad_Sigma0),
    }


def loglik_and_grad(
    params: ParamVector, obs: ObsSeq
) -> tuple[float, np.ndarray]:
    """Kalman log-likelihood and its gradient wrt the packed vector"""
    lgssm = params.to_params()
    filt = kalman_filter(lgssm, obs)
    smooth = rts_smooth(lgssm, filt)
    grads = expected_loglik_gradients(lgssm, obs, smooth)
    return filt.loglik, params.chain_rule(grads)


class AdamOptimizer:
    """Adam moments for gradient *ascent*"""

    def __init__(self, size: int, config: LearnerConfig):
        self.learning_rate = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.epsilon = config.epsilon
        self.first_moment = np.zeros(size)
        self.second_moment = np.zeros(size)
        self.num_steps = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Update the moments and return the parameter increment"""
        self.num_steps += 1
        self.first_moment = (
            self.beta1 * self.first_moment + (1 - self.beta1) * grad
        )
        self.second_moment = (
            self.beta2 * self.second_moment + (1 - self.beta2) * grad**2
        )
        m_hat = self.first_moment / (1 - self.beta1**self.num_steps)
        v_hat = self.second_moment / (1 - self.beta2**self.num_steps)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ParamVector
    # Objective at every evaluated iterate, starting with the init
    history: np.ndarray
    best_iteration: int

    @property
    def best_objective(self) -> float:
        return float(self.history[self.best_iteration])

    @property
    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(self.history)


def mean_loglik_and_grad(
    params: ParamVector, dataset: list[ObsSeq]
) -> tuple[float, np.ndarray]:
    results = ordered_map(lambda obs: loglik_and_grad(params, obs), dataset)

    # Fixed reduction order, independent of the thread count
    value = 0.0
    grad = np.zeros(params.size)
    for v, g in results:
        value += v
        grad += g

    return value / len(dataset), grad / len(dataset)


def _check_dataset(params: ParamVector, dataset: list[ObsSeq]):
    if not dataset:
        msg = 'The dataset must contain at least one sequence'
        raise ValidationError(msg)

    for i, obs in enumerate(dataset):
        if obs.d_x != params.d_x:
            msg = (
                f'Sequence {i} has observation dimension {obs.d_x}, '
                f'expected {params.d_x}'
            )
            raise ValidationError(msg)


def fit_offline(
    init: ParamVector, dataset: list[ObsSeq], cfg: LearnerConfig
) -> FitResult:
    """Adam ascent on the mean per-sequence log-likelihood

    At most `cfg.max_iters` updates are made; the iterate with the best
    objective among all evaluated ones is returned.
    """
    dataset = list(dataset)
    _check_dataset(init, dataset)

    optimizer = AdamOptimizer(init.size, cfg)
    values = init.values.copy()
    history = []
    best_iteration = 0
    best_values = values

    for iteration in range(cfg.max_iters + 1):
        if not np.all(np.isfinite(values)):
            raise DivergenceError(iteration, float('nan'))

        current = init.with_values(values)
        try:
            objective, grad = mean_loglik_and_grad(current, dataset)
        except (NumericalError, ValidationError) as e:
            # An overflowing iterate fails validation of its covariances
            raise DivergenceError(iteration, float('nan')) from e

        if not np.isfinite(objective) or not np.all(np.isfinite(grad)):
            raise DivergenceError(iteration, objective)

        history.append(objective)
        if objective > history[best_iteration]:
            best_iteration = iteration
            best_values = values

        logger.debug(f'fit_offline iteration {iteration}: {objective:.6f}')

        grad_norm = np.linalg.norm(grad)
        if iteration == cfg.max_iters or grad_norm < cfg.grad_tol:
            break

        values = values + optimizer.step(grad)

    logger.info(
        f'fit_offline finished after {len(history) - 1} updates, best '
        f'objective {history[best_iteration]:.6f} at iteration '
        f'{best_iteration}'
    )
    return FitResult(
        init.with_values(best_values), np.array(history), best_iteration
    )


def adapted_mask(params: ParamVector, transition_only: bool) -> np.ndarray:
    """Entries of the packed vector that online updates may change"""
    if not transition_only:
        return np.ones(params.size, dtype=bool)

    mask = np.zeros(params.size, dtype=bool)
    mask[params.layout['A']] = True
    return mask


@dataclass(eq=False)
class OnlineState:
    """Moving-horizon learner state, owned by a single stream

    `candidate` is the Adam iterate fitted to the moving window and
    `params` the published model used for filtering and forecasting.
    Before each update, the candidate predicts the incoming observation
    and its log-density gain over `params` is accumulated, CUSUM style,
    in `evidence`. The candidate is published once the evidence exceeds
    `config.switch_threshold` nats.
    """

    params: ParamVector
    candidate: ParamVector
    config: LearnerConfig
    optimizer: AdamOptimizer
    buffer: deque
    mask: np.ndarray
    step: int = 0
    evidence: float = 0.0
    num_switches: int = 0
    loglik_log: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, params: ParamVector, config: LearnerConfig):
        return cls(
            params=params,
            candidate=params,
            config=config,
            optimizer=AdamOptimizer(params.size, config),
            buffer=deque(maxlen=config.horizon),
            mask=adapted_mask(params, config.adapt_transition_only),
        )

    def window(self) -> ObsSeq:
        return ObsSeq.from_array(
            np.array(self.buffer).reshape(-1, self.params.d_x),
            t0_index=self.step - len(self.buffer),
        )


def _candidate_gain(state: OnlineState, published: FilterResult) -> float:
    if state.candidate is state.params:
        return 0.0

    try:
        filt = kalman_filter(state.candidate.to_params(), state.window())
    except (NumericalError, ValidationError) as e:
        raise DivergenceError(state.step, float('nan')) from e

    gain = filt.per_step_loglik[-1] - published.per_step_loglik[-1]
    if not np.isfinite(gain):
        raise DivergenceError(state.step, gain)

    return float(gain)


def _adapt_candidate(state: OnlineState, window: ObsSeq):
    for _ in range(state.config.inner_steps_per_sample):
        try:
            value, grad = loglik_and_grad(state.candidate, window)
        except (NumericalError, ValidationError) as e:
            raise DivergenceError(state.step, float('nan')) from e

        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergenceError(state.step, value)

        delta = state.optimizer.step(np.where(state.mask, grad, 0.0))
        values = state.candidate.values + delta
        if not np.all(np.isfinite(values)):
            raise DivergenceError(state.step, value)

        state.candidate = state.candidate.with_values(values)


def online_step(state: OnlineState, new_obs: np.ndarray) -> OnlineState:
    """Push one observation and adapt the params on the current window

    A NaN-containing observation is treated as missing. The state is
    updated in place and returned. `loglik_log` records the window
    log-likelihood under the params published when the observation
    arrived.
    """
    new_obs = np.asarray(new_obs, dtype=np.float64).ravel()
    if new_obs.shape != (state.params.d_x,):
        msg = (
            f'Observation has shape {new_obs.shape}, expected '
            f'({state.params.d_x},)'
        )
        raise ValidationError(msg)

    state.buffer.append(new_obs)
    window = state.window()

    published = kalman_filter(state.params.to_params(), window)
    loglik = published.loglik

    state.evidence = max(
        0.0, state.evidence + _candidate_gain(state, published)
    )
    if state.evidence > state.config.switch_threshold:
        logger.info(
            f'online step {state.step}: publishing adapted params '
            f'(evidence {state.evidence:.2f} nats)'
        )
        state.params = state.candidate
        state.evidence = 0.0
        state.num_switches += 1

    _adapt_candidate(state, window)

    state.loglik_log.append(loglik)
    state.step += 1
    logger.debug(f'online step {state.step}: window loglik {loglik:.6f}')
    return state


class ForecastScore(NamedTuple):
    loglik: float
    rmse: float


def evaluate_forecast(
    params: LgssmParams,
    obs_past: ObsSeq,
    obs_future: ObsSeq,
    n_samples: int = 0,
    seed: int = 0,
) -> ForecastScore:
    """Score a forecast of obs_future made from obs_past

    The log-likelihood is the exact conditional density
    log p(future | past). The RMSE compares predictive means with the
    observed future rows. With `n_samples > 0` it is instead the mean
    RMSE of that many sampled forecast paths.
    """
    H = len(obs_future)
    if H < 1:
        raise PreconditionError('The forecast horizon must be at least 1')

    n_past = len(obs_past)
    if n_past:
        filt = kalman_filter(params, ObsSeq.concatenate(obs_past, obs_future))
        loglik = float(np.sum(filt.per_step_loglik[n_past:]))
        last = filt.filtered[n_past - 1]
    else:
        loglik = kalman_filter(params, obs_future).loglik
        last = Gaussian(params.mu0, params.Sigma0)

    observed = obs_future.observed
    if not np.any(observed):
        return ForecastScore(loglik, float('nan'))

    truth = obs_future.values[observed]
    if n_samples == 0:
        predicted = forecast(params, last, H).observations.means
        return ForecastScore(loglik, rmse(predicted[observed], truth))

    paths = sample_forecast_paths(params, last, H, n_samples, seed)
    errors = [rmse(path[observed], truth) for path in paths]
    return ForecastScore(loglik, float(np.mean(errors)))


def sample_forecast_paths(
    params: LgssmParams,
    last_filtered: Gaussian,
    k: int,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Draw (n_samples, k, d_x) observation paths from the forecast"""
    rng = make_rng(seed, STREAM_FORECAST)
    sqrt_P = psd_sqrt(last_filtered.cov, 'Filtered covariance')
    sqrt_Q = psd_sqrt(params.Q, 'Q')
    sqrt_R = psd_sqrt(params.R, 'R')

    z = last_filtered.mean + rng.standard_normal(
        (n_samples, params.d_z)
    ) @ sqrt_P.T
    paths = np.empty((n_samples, k, params.d_x))
    for j in range(k):
        z = z @ params.A.T + rng.standard_normal(
            (n_samples, params.d_z)
        ) @ sqrt_Q.T
        paths[:, j] = z @ params.C.T + rng.standard_normal(
            (n_samples, params.d_x)
        ) @ sqrt_R.T

    return paths

"""Evidence lower bound of the image sequence model

For frames y_{1:T} and a reference y_0 the bound is

    E_q[ log p(y | y0, x) - log q(x | y0, y) + log p(x) ]

with x_t ~ q(x_t | y0, y_t) drawn independently per step. The inner
expectation over z given x collapses to the Kalman log-likelihood
log p(x), which is what the latent term returns.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging

import numpy as np

from motionssm.model.config import LearnerConfig
from motionssm.model.core.deform import exp_svf, gaussian_smooth, warp
from motionssm.model.core.errors import (
    DivergenceError,
    NonFiniteError,
    NumericalError,
)
from motionssm.model.core.kalman import (
    complete_data_logpdf,
    kalman_filter,
    sample_posterior,
    simulate,
)
from motionssm.model.core.learn import (
    AdamOptimizer,
    ParamVector,
    loglik_and_grad,
)
from motionssm.model.core.linalg import (
    LOG_2PI,
    cholesky_with_jitter,
    psd_sqrt,
    symmetrize,
)
from motionssm.model.frames import Frame, FrameSeq
from motionssm.model.lgssm import Gaussian, LgssmParams, ObsSeq
from motionssm.model.serializable import ValidationError
from motionssm.utils.parallel import ordered_map
from motionssm.utils.rng import (
    STREAM_ENCODER,
    STREAM_OBS_NOISE,
    make_rng,
)

logger = logging.getLogger(__name__)

# Monte-Carlo samples per parallel work item
SAMPLE_CHUNK_SIZE = 256

DEFAULT_TRAINING_SAMPLES = 1
DEFAULT_REPORTING_SAMPLES = 1024


class Encoder(ABC):
    """Amortized posterior q(x_t | y_0, y_t)"""

    @property
    @abstractmethod
    def d_x(self) -> int:
        pass

    @abstractmethod
    def encode(self, y0: Frame, y_t: np.ndarray) -> Gaussian:
        pass

    def parameters(self) -> np.ndarray:
        raise NotImplementedError(f'{type(self).__name__} is not trainable')

    def with_parameters(self, values: np.ndarray) -> 'Encoder':
        raise NotImplementedError(f'{type(self).__name__} is not trainable')


class Decoder(ABC):
    """Generative model p(y_t | y_0, x_t)"""

    @abstractmethod
    def feature_extract(self, y0: Frame) -> np.ndarray:
        """Spatial features s of the reference frame"""

    @abstractmethod
    def decode(self, x_t: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Mean of p(y_t | y_0, x_t)"""

    @abstractmethod
    def log_likelihood(
        self, y_t: np.ndarray, x_t: np.ndarray, s: np.ndarray
    ) -> float:
        pass

    def parameters(self) -> np.ndarray:
        raise NotImplementedError(f'{type(self).__name__} is not trainable')

    def with_parameters(self, values: np.ndarray) -> 'Decoder':
        raise NotImplementedError(f'{type(self).__name__} is not trainable')


def _pack_factor(L: np.ndarray) -> np.ndarray:
    raw = L.copy()
    np.fill_diagonal(raw, np.log(np.diag(L)))
    return raw[np.tril_indices(L.shape[0])]


def _unpack_factor(values: np.ndarray, d: int) -> np.ndarray:
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = values
    np.fill_diagonal(L, np.exp(np.diag(L)))
    return L


class LinearEncoder(Encoder):
    """q(x_t | y0, y_t) = N(G (y_t - y0), L L^T) on flattened frames"""

    def __init__(self, gain: np.ndarray, cov_factor: np.ndarray):
        self.gain = np.asarray(gain, dtype=np.float64)
        self.cov_factor = np.tril(np.asarray(cov_factor, dtype=np.float64))
        d = self.gain.shape[0]
        if self.cov_factor.shape != (d, d):
            msg = (
                f'Covariance factor has shape {self.cov_factor.shape}, '
                f'expected ({d}, {d})'
            )
            raise ValidationError(msg)

        if np.any(np.diag(self.cov_factor) <= 0):
            msg = 'Covariance factor needs a positive diagonal'
            raise ValidationError(msg)

    @property
    def d_x(self) -> int:
        return self.gain.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return symmetrize(self.cov_factor @ self.cov_factor.T)

    def encode(self, y0: Frame, y_t: np.ndarray) -> Gaussian:
        residual = np.ravel(y_t) - np.ravel(y0.image)
        if residual.size != self.gain.shape[1]:
            msg = (
                f'Frame has {residual.size} pixels, the encoder expects '
                f'{self.gain.shape[1]}'
            )
            raise ValidationError(msg)

        return Gaussian(self.gain @ residual, self.cov)

    def parameters(self) -> np.ndarray:
        return np.concatenate(
            [self.gain.ravel(), _pack_factor(self.cov_factor)]
        )

    def with_parameters(self, values: np.ndarray) -> 'LinearEncoder':
        n = self.gain.size
        return LinearEncoder(
            values[:n].reshape(self.gain.shape),
            _unpack_factor(values[n:], self.d_x),
        )


class LinearDecoder(Decoder):
    """p(y_t | y0, x_t) = N(y0 + W x_t, R_y) on flattened frames"""

    def __init__(self, W: np.ndarray, R_y: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)
        self.R_y = np.asarray(R_y, dtype=np.float64)
        self._factor = cholesky_with_jitter(self.R_y, 'R_y')

    def feature_extract(self, y0: Frame) -> np.ndarray:
        return np.ravel(y0.image).astype(np.float64)

    def decode(self, x_t: np.ndarray, s: np.ndarray) -> np.ndarray:
        return s + self.W @ x_t

    def log_likelihood(self, y_t, x_t, s) -> float:
        return self._factor.logpdf(np.ravel(y_t) - self.decode(x_t, s))

    def parameters(self) -> np.ndarray:
        return self.W.ravel().copy()

    def with_parameters(self, values: np.ndarray) -> 'LinearDecoder':
        return LinearDecoder(values.reshape(self.W.shape), self.R_y)


class BasisWarpDecoder(Decoder):
    """Deforms y_0 by the exponential of a linear velocity basis

    v_t = sum_i x_t[i] B_i is smoothed, exponentiated and used to warp
    the reference. The likelihood is isotropic Gaussian with variance
    `noise_var`.
    """

    def __init__(
        self,
        basis: np.ndarray,
        noise_var: float,
        sigma_g: float = 2.0,
        n_squarings: int = 4,
    ):
        self.basis = np.asarray(basis, dtype=np.float64)
        if self.basis.ndim != 4 or self.basis.shape[-1] != 2:
            msg = f'Basis must be (d_x, H, W, 2), got {self.basis.shape}'
            raise ValidationError(msg)

        if noise_var <= 0:
            raise ValidationError('noise_var must be positive')

        self.noise_var = float(noise_var)
        self.sigma_g = sigma_g
        self.n_squarings = n_squarings

    def deformation(self, x_t: np.ndarray) -> np.ndarray:
        v = np.tensordot(x_t, self.basis, axes=1)
        return exp_svf(gaussian_smooth(v, self.sigma_g), self.n_squarings)

    def feature_extract(self, y0: Frame) -> np.ndarray:
        return np.asarray(y0.image, dtype=np.float64)

    def decode(self, x_t: np.ndarray, s: np.ndarray) -> np.ndarray:
        return warp(s, self.deformation(x_t))

    def log_likelihood(self, y_t, x_t, s) -> float:
        residual = np.asarray(y_t, dtype=np.float64) - self.decode(x_t, s)
        n = residual.size
        return -0.5 * (
            n * (LOG_2PI + np.log(self.noise_var))
            + np.sum(residual**2) / self.noise_var
        )

    def parameters(self) -> np.ndarray:
        return np.log([self.noise_var])

    def with_parameters(self, values: np.ndarray) -> 'BasisWarpDecoder':
        return BasisWarpDecoder(
            self.basis,
            float(np.exp(values[0])),
            self.sigma_g,
            self.n_squarings,
        )


@dataclass(frozen=True, eq=False)
class LinearStandIn:
    """Linear-Gaussian image model y_t = y_0 + W x_t + noise

    Its exact encoder is the posterior of x_t given y_t alone, under a
    flat prior on x_t. log p(y_t | x_t) - log q(x_t | y_t) is then
    constant in x_t, and the bound becomes tight as R_y shrinks against
    the LG-SSM covariances.
    """

    W: np.ndarray
    R_y: np.ndarray
    frame_shape: tuple[int, int]

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        d_y = self.frame_shape[0] * self.frame_shape[1]
        if W.ndim != 2 or W.shape[0] != d_y:
            msg = f'W must have {d_y} rows for frames {self.frame_shape}'
            raise ValidationError(msg)

        if np.linalg.matrix_rank(W) < W.shape[1]:
            raise ValidationError('W must have full column rank')

        object.__setattr__(self, 'W', W)
        object.__setattr__(
            self, 'R_y', np.asarray(self.R_y, dtype=np.float64)
        )

    @property
    def d_x(self) -> int:
        return self.W.shape[1]

    def decoder(self) -> LinearDecoder:
        return LinearDecoder(self.W, self.R_y)

    def exact_encoder(self, cov_scale: float = 1.0) -> LinearEncoder:
        """Exact posterior encoder, optionally with a scaled covariance"""
        R_factor = cholesky_with_jitter(self.R_y, 'R_y')
        R_inv_W = R_factor.solve(self.W)
        precision = symmetrize(self.W.T @ R_inv_W)
        cov = cholesky_with_jitter(precision, 'Posterior precision').inverse()
        gain = cov @ R_inv_W.T
        return LinearEncoder(gain, psd_sqrt(cov_scale * cov))

    def composed_lgssm(self, lgssm: LgssmParams) -> LgssmParams:
        """LG-SSM of y_t - y_0 with x_t marginalized out"""
        return lgssm.replace(
            C=self.W @ lgssm.C,
            R=symmetrize(self.W @ lgssm.R @ self.W.T + self.R_y),
        )

    def exact_log_evidence(
        self, lgssm: LgssmParams, y0: Frame, seq: FrameSeq
    ) -> float:
        residuals = seq.frames.reshape(len(seq), -1) - np.ravel(y0.image)
        return kalman_filter(
            self.composed_lgssm(lgssm), ObsSeq(residuals)
        ).loglik

    def sample(
        self, lgssm: LgssmParams, y0: Frame, T: int, seed: int
    ) -> tuple[np.ndarray, FrameSeq]:
        """Simulate latents x_{1:T} and frames y_{1:T}"""
        _, x = simulate(lgssm, T, seed)
        rng = make_rng(seed, STREAM_OBS_NOISE)
        noise = rng.standard_normal((T, self.W.shape[0])) @ psd_sqrt(
            self.R_y
        ).T
        frames = np.ravel(y0.image) + x @ self.W.T + noise
        return x, FrameSeq(frames.reshape(T, *self.frame_shape), y0)


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    n_samples: int
    reconstruction: float
    latent: float
    entropy: float


def latent_term(
    lgssm: LgssmParams,
    x_samples: ObsSeq,
    mode: str = 'analytic',
    n_samples: int = 10_000,
    seed: int = 0,
) -> float:
    """E_{p(z|x)}[log p(x, z) - log p(z | x)], which equals log p(x)"""
    if not np.all(x_samples.observed):
        raise ValidationError('The latent term needs fully observed samples')

    if mode == 'analytic':
        return kalman_filter(lgssm, x_samples).loglik

    if mode == 'monte_carlo':
        return latent_term_monte_carlo(lgssm, x_samples, n_samples, seed)[0]

    raise ValidationError(f'Unknown latent term mode: {mode!r}')


def latent_term_monte_carlo(
    lgssm: LgssmParams, x_samples: ObsSeq, n_samples: int, seed: int
) -> tuple[float, float]:
    """Monte-Carlo latent term and its standard error

    Draws z from the smoothing posterior and averages
    log p(x, z) - log p(z | x).
    """
    if not np.all(x_samples.observed):
        raise ValidationError('The latent term needs fully observed samples')

    draws, posterior_logpdf = sample_posterior(
        lgssm, x_samples, n_samples, seed
    )
    values = np.array(
        [
            complete_data_logpdf(lgssm, x_samples, z) - lp
            for z, lp in zip(draws, posterior_logpdf)
        ]
    )
    return float(values.mean()), _standard_error(values)


def _standard_error(values: np.ndarray) -> float:
    if values.size < 2:
        return float('nan')

    return float(values.std(ddof=1) / np.sqrt(values.size))


def _check_sequence(encoder: Encoder, lgssm: LgssmParams, seq: FrameSeq):
    if encoder.d_x != lgssm.d_x:
        msg = (
            f'Encoder dimension {encoder.d_x} does not match the LG-SSM '
            f'observation dimension {lgssm.d_x}'
        )
        raise ValidationError(msg)

    if len(seq) < 1:
        raise ValidationError('The frame sequence is empty')


def _elbo_terms(
    encoder: Encoder,
    decoder: Decoder,
    lgssm: LgssmParams,
    y0: Frame,
    seq: FrameSeq,
    eps: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample ELBO terms for standard-normal draws eps (n, T, d_x)

    Returns the reconstruction, latent and entropy terms and the x
    samples they were computed from.
    """
    s = decoder.feature_extract(y0)
    posteriors = [encoder.encode(y0, seq.frames[t]) for t in range(len(seq))]
    chols = [
        cholesky_with_jitter(q.cov, 'Encoder covariance', t)
        for t, q in enumerate(posteriors)
    ]
    lowers = np.stack([c.lower for c in chols])

    means = np.stack([q.mean for q in posteriors])
    x = means + np.einsum('tij,ntj->nti', lowers, eps)

    n = eps.shape[0]
    reconstruction = np.zeros(n)
    entropy = np.zeros(n)
    latent = np.zeros(n)
    for i in range(n):
        for t, q in enumerate(posteriors):
            reconstruction[i] += decoder.log_likelihood(
                seq.frames[t], x[i, t], s
            )
            entropy[i] -= chols[t].logpdf(x[i, t] - q.mean)

        latent[i] = latent_term(lgssm, ObsSeq(x[i]))

    for name, values in (
        ('reconstruction', reconstruction),
        ('latent', latent),
        ('entropy', entropy),
    ):
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(name)

    return reconstruction, latent, entropy, x


def elbo_estimate(
    encoder: Encoder,
    decoder: Decoder,
    lgssm: LgssmParams,
    y0: Frame,
    seq: FrameSeq,
    n_samples: int = DEFAULT_REPORTING_SAMPLES,
    seed: int = 0,
) -> ElboEstimate:
    """Monte-Carlo ELBO estimate, deterministic given the seed"""
    if n_samples < 1:
        raise ValidationError(f'n_samples must be >= 1, got {n_samples}')

    _check_sequence(encoder, lgssm, seq)

    T, d_x = len(seq), encoder.d_x
    starts = range(0, n_samples, SAMPLE_CHUNK_SIZE)

    def run_chunk(start):
        size = min(SAMPLE_CHUNK_SIZE, n_samples - start)
        chunk_index = start // SAMPLE_CHUNK_SIZE
        rng = make_rng(seed, STREAM_ENCODER, chunk_index)
        eps = rng.standard_normal((size, T, d_x))
        return _elbo_terms(encoder, decoder, lgssm, y0, seq, eps)[:3]

    chunks = ordered_map(run_chunk, starts)
    reconstruction = np.concatenate([c[0] for c in chunks])
    latent = np.concatenate([c[1] for c in chunks])
    entropy = np.concatenate([c[2] for c in chunks])

    terms = (reconstruction.mean(), latent.mean(), entropy.mean())
    return ElboEstimate(
        value=float(sum(terms)),
        std_error=_standard_error(reconstruction + latent + entropy),
        n_samples=n_samples,
        reconstruction=float(terms[0]),
        latent=float(terms[1]),
        entropy=float(terms[2]),
    )


@dataclass(frozen=True, eq=False)
class JointFitResult:
    encoder: Encoder
    decoder: Decoder
    lgssm: LgssmParams
    # Stochastic ELBO objective at every iteration
    history: np.ndarray


def joint_fit(
    encoder: Encoder,
    decoder: Decoder,
    lgssm: LgssmParams,
    dataset: list[FrameSeq],
    cfg: LearnerConfig,
    n_samples: int = DEFAULT_TRAINING_SAMPLES,
    fd_step: float = 1e-6,
) -> JointFitResult:
    """Adam ascent on the mean ELBO over encoder, decoder and LG-SSM

    LG-SSM gradients are analytic (Fisher's identity on the sampled x).
    Encoder and decoder gradients use central finite differences with
    common random numbers. The final iterate is returned.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError('The dataset must contain at least one sequence')

    for seq in dataset:
        _check_sequence(encoder, lgssm, seq)

    gamma = ParamVector.from_params(lgssm)
    phi = encoder.parameters()
    theta = decoder.parameters()
    n_phi, n_theta = phi.size, theta.size
    values = np.concatenate([phi, theta, gamma.values])
    optimizer = AdamOptimizer(values.size, cfg)

    def unpack(v):
        return (
            encoder.with_parameters(v[:n_phi]),
            decoder.with_parameters(v[n_phi : n_phi + n_theta]),
            gamma.with_values(v[n_phi + n_theta :]),
        )

    def objective(v, noise):
        enc, dec, gam = unpack(v)
        lg = gam.to_params()
        total = 0.0
        for seq, eps in zip(dataset, noise):
            terms = _elbo_terms(enc, dec, lg, seq.reference, seq, eps)[:3]
            total += np.mean(sum(terms))

        return total / len(dataset)

    def value_and_grad(v, noise):
        enc, dec, gam = unpack(v)
        lg = gam.to_params()
        value = 0.0
        grad_gamma = np.zeros(gam.size)
        for seq, eps in zip(dataset, noise):
            rec, lat, ent, x = _elbo_terms(
                enc, dec, lg, seq.reference, seq, eps
            )
            value += np.mean(rec + lat + ent)
            for x_i in x:
                grad_gamma += loglik_and_grad(gam, ObsSeq(x_i))[1] / n_samples

        value /= len(dataset)
        grad_gamma /= len(dataset)

        grad_fd = np.zeros(n_phi + n_theta)
        for j in range(n_phi + n_theta):
            h = fd_step * max(1.0, abs(v[j]))
            forward = v.copy()
            backward = v.copy()
            forward[j] += h
            backward[j] -= h
            grad_fd[j] = (
                objective(forward, noise) - objective(backward, noise)
            ) / (2 * h)

        return value, np.concatenate([grad_fd, grad_gamma])

    history = []
    for iteration in range(cfg.max_iters + 1):
        rng = make_rng(cfg.seed, STREAM_ENCODER, iteration)
        noise = [
            rng.standard_normal((n_samples, len(seq), encoder.d_x))
            for seq in dataset
        ]

        if not np.all(np.isfinite(values)):
            raise DivergenceError(iteration, float('nan'))

        try:
            value, grad = value_and_grad(values, noise)
        except (NumericalError, ValidationError) as e:
            raise DivergenceError(iteration, float('nan')) from e

        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergenceError(iteration, value)

        history.append(value)
        logger.debug(f'joint_fit iteration {iteration}: {value:.6f}')
        if iteration == cfg.max_iters:
            break

        values = values + optimizer.step(grad)

    enc, dec, gam = unpack(values)
    return JointFitResult(enc, dec, gam.to_params(), np.array(history))

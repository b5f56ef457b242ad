"""Synthetic image sequences with known ground truth

A known LG-SSM drives the motion variables x_t. Each x_t is mapped to a
velocity field through a fixed basis, exponentiated, and used to deform
a phantom reference image and its labels. The experiments below then
measure how well imputation and online forecasting recover the motion.
"""

from dataclasses import asdict, dataclass
import logging

import numpy as np

from motionssm.model.config import LearnerConfig
from motionssm.model.core.deform import (
    DEFAULT_SQUARINGS,
    exp_svf,
    gaussian_smooth,
    jacobian_det,
    warp,
)
from motionssm.model.core.errors import DiffeomorphismError, PreconditionError
from motionssm.model.core.kalman import (
    forecast,
    impute,
    kalman_filter,
    simulate,
)
from motionssm.model.core.learn import (
    OnlineState,
    ParamVector,
    evaluate_forecast,
    fit_offline,
    online_step,
)
from motionssm.model.core.metrics import dice, hd95, rmse
from motionssm.model.frames import Frame
from motionssm.model.lgssm import LgssmParams, ObsSeq
from motionssm.model.serializable import ValidationError
from motionssm.utils.rng import (
    STREAM_BASIS,
    STREAM_CALIBRATION,
    STREAM_DYNAMICS,
    STREAM_OBS_NOISE,
    STREAM_PHANTOM,
    STREAM_PRETRAIN,
    STREAM_SIMULATE,
    derive_seed,
    make_rng,
)

logger = logging.getLogger(__name__)

# Label values of the phantom regions
REGIONS = {
    'ring': 1,
    'pool': 2,
}

IMPUTATION_STRIDES = (1, 5, 10)

# Scenario length and regime shift step of the online experiments
ONLINE_T = 450
ONLINE_SHIFT_STEP = 100

# Largest per-pixel velocity gradient allowed for a 3-sigma excursion,
# and the Jacobian determinant such excursions must stay above.
TARGET_VELOCITY_GRADIENT = 0.5
MIN_CALIBRATION_DET = 0.1
CALIBRATION_PATTERNS = 16


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


def make_phantom(H: int = 64, W: int = 64, seed: int = 0) -> Frame:
    """Cardiac-like phantom: a bright ring around a darker pool

    The ring has label 1 and the pool label 2.
    """
    if H < 32 or W < 32:
        raise ValidationError(f'Phantoms must be at least 32 x 32: {H} x {W}')

    rng = make_rng(seed, STREAM_PHANTOM)
    rows, cols = np.meshgrid(
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing='ij',
    )
    center = (
        H / 2 + rng.uniform(-0.05, 0.05) * H,
        W / 2 + rng.uniform(-0.05, 0.05) * W,
    )
    outer_axes = (rng.uniform(0.26, 0.32) * H, rng.uniform(0.26, 0.32) * W)
    inner_fraction = rng.uniform(0.62, 0.7)
    inner_axes = tuple(a * inner_fraction for a in outer_axes)
    angle = rng.uniform(0, np.pi)

    dr = rows - center[0]
    dc = cols - center[1]
    u = dr * np.cos(angle) + dc * np.sin(angle)
    v = -dr * np.sin(angle) + dc * np.cos(angle)

    def elliptic_radius(axes):
        return np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)

    r_outer = elliptic_radius(outer_axes)
    r_inner = elliptic_radius(inner_axes)

    labels = np.zeros((H, W), dtype=np.int32)
    labels[r_outer <= 1] = REGIONS['ring']
    labels[r_inner <= 1] = REGIONS['pool']

    # Soft edges about one pixel wide
    inside_outer = _sigmoid((1 - r_outer) * np.mean(outer_axes))
    inside_inner = _sigmoid((1 - r_inner) * np.mean(inner_axes))

    background = (
        0.1
        + rng.uniform(0.0, 0.1) * cols / W
        + rng.uniform(0.0, 0.1) * rows / H
    )
    polar = np.arctan2(v, u)
    ring = rng.uniform(0.75, 0.9) * (
        1 + 0.1 * np.cos(polar + rng.uniform(0, 2 * np.pi))
    )
    pool = rng.uniform(0.35, 0.5) * (1 - 0.2 * r_inner**2)

    image = (
        background * (1 - inside_outer)
        + ring * inside_outer * (1 - inside_inner)
        + pool * inside_inner
    )
    return Frame(image, labels)


def default_lgssm(
    d_z: int = 16, d_x: int = 8, seed: int = 0, obs_var: float = 1e-4
) -> LgssmParams:
    """Damped rotations with periods of 20 to 60 steps

    Process noise is chosen so that the stationary state covariance is
    the identity, which is also the initial covariance.
    """
    rng = make_rng(seed, STREAM_DYNAMICS)
    A = np.zeros((d_z, d_z))
    Q = np.zeros((d_z, d_z))
    for b in range(d_z // 2):
        omega = 2 * np.pi / rng.uniform(20, 60)
        rho = rng.uniform(0.985, 0.995)
        i = 2 * b
        A[i : i + 2, i : i + 2] = rho * _rotation(omega)
        Q[i : i + 2, i : i + 2] = (1 - rho**2) * np.eye(2)

    if d_z % 2:
        rho = rng.uniform(0.985, 0.995)
        A[-1, -1] = rho
        Q[-1, -1] = 1 - rho**2

    C = rng.standard_normal((d_x, d_z)) / np.sqrt(d_z)
    return LgssmParams(
        A=A,
        Q=Q,
        C=C,
        R=obs_var * np.eye(d_x),
        mu0=np.zeros(d_z),
        Sigma0=np.eye(d_z),
    )


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate_dynamics(A: np.ndarray, angle: float) -> np.ndarray:
    """Advance the phase of every 2 x 2 rotation block of A by angle"""
    d = A.shape[0]
    G = np.eye(d)
    for b in range(d // 2):
        G[2 * b : 2 * b + 2, 2 * b : 2 * b + 2] = _rotation(angle)

    return A @ G


def _max_gradient_norm(field: np.ndarray) -> float:
    grads = [np.gradient(field[..., k]) for k in range(2)]
    squared = sum(g**2 for pair in grads for g in pair)
    return float(np.sqrt(squared.max()))


def make_basis(
    shape: tuple[int, int], d_x: int, seed: int, sigma_g: float
) -> np.ndarray:
    """Smoothed low-frequency fields with unit max gradient norm

    Even indices are sinusoids, odd indices Gaussian bumps.
    """
    rng = make_rng(seed, STREAM_BASIS)
    H, W = shape
    rows, cols = np.meshgrid(
        np.arange(H, dtype=np.float64) / H,
        np.arange(W, dtype=np.float64) / W,
        indexing='ij',
    )
    basis = np.empty((d_x, H, W, 2))
    for i in range(d_x):
        direction = rng.standard_normal(2)
        direction /= np.linalg.norm(direction)
        if i % 2 == 0:
            k_r, k_c = rng.choice([0.5, 1.0, 1.5], size=2)
            profile = np.sin(
                2 * np.pi * (k_r * rows + k_c * cols)
                + rng.uniform(0, 2 * np.pi)
            )
        else:
            center = rng.uniform(0.3, 0.7, size=2)
            width = rng.uniform(0.15, 0.3)
            profile = np.exp(
                -((rows - center[0]) ** 2 + (cols - center[1]) ** 2)
                / (2 * width**2)
            )

        field = profile[..., None] * direction
        field = gaussian_smooth(field, sigma_g)
        basis[i] = field / _max_gradient_norm(field)

    return basis


def motion_excursion(lgssm: LgssmParams, T: int) -> np.ndarray:
    """Largest |mean| + 3 sigma of each x_t component over T steps"""
    A, Q, C, R = lgssm.A, lgssm.Q, lgssm.C, lgssm.R
    m, P = lgssm.mu0, lgssm.Sigma0
    excursion = np.zeros(lgssm.d_x)
    for _ in range(T):
        m = A @ m
        P = A @ P @ A.T + Q
        sigma = np.sqrt(np.clip(np.diag(C @ P @ C.T + R), 0, None))
        excursion = np.maximum(excursion, np.abs(C @ m) + 3 * sigma)

    return excursion


def _deformation(
    basis: np.ndarray, x: np.ndarray, sigma_g: float, n_squarings: int
) -> np.ndarray:
    v = np.tensordot(x, basis, axes=1)
    return exp_svf(gaussian_smooth(v, sigma_g), n_squarings)


def calibrate_basis(
    basis: np.ndarray,
    excursion: np.ndarray,
    sigma_g: float,
    seed: int,
    n_squarings: int = DEFAULT_SQUARINGS,
) -> np.ndarray:
    """Scale unit-gradient basis fields so excursions stay diffeomorphic

    The initial amplitude gives an RMS velocity gradient of
    TARGET_VELOCITY_GRADIENT at the excursion. It is shrunk until every
    tested sign pattern of the excursion has a min Jacobian determinant
    above MIN_CALIBRATION_DET.
    """
    scale = np.sqrt(np.sum(excursion**2))
    if scale == 0:
        return basis.copy()

    amplitude = TARGET_VELOCITY_GRADIENT / scale
    d = len(excursion)
    rng = make_rng(seed, STREAM_CALIBRATION)
    signs = np.vstack(
        [
            np.ones(d),
            rng.choice([-1.0, 1.0], size=(CALIBRATION_PATTERNS, d)),
        ]
    )
    for _ in range(30):
        scaled = amplitude * basis
        worst = min(
            jacobian_det(
                _deformation(scaled, s * excursion, sigma_g, n_squarings)
            ).min()
            for s in signs
        )
        if worst > MIN_CALIBRATION_DET:
            return scaled

        logger.info(
            f'Basis amplitude {amplitude:.4g} gives min Jacobian '
            f'determinant {worst:.4g}, shrinking'
        )
        amplitude *= 0.8

    raise DiffeomorphismError(worst)


@dataclass(frozen=True, eq=False)
class RegimeShift:
    # Index of the first step generated with the replacement dynamics
    step: int
    A: np.ndarray


@dataclass(frozen=True, eq=False)
class SynthScenario:
    lgssm: LgssmParams
    basis: np.ndarray
    phantom: Frame
    T: int
    sigma_g: float
    obs_noise: float
    regime_shift: RegimeShift | None
    seed: int
    n_squarings: int = DEFAULT_SQUARINGS

    def __post_init__(self):
        if self.basis.shape[0] != self.lgssm.d_x:
            msg = (
                f'{self.basis.shape[0]} basis fields for '
                f'd_x={self.lgssm.d_x}'
            )
            raise ValidationError(msg)

        if self.basis.shape[1:] != (*self.phantom.shape, 2):
            raise ValidationError('Basis fields must match the phantom shape')

        if self.phantom.labels is None:
            raise ValidationError('The phantom needs a label mask')

        if self.T < 1:
            raise ValidationError(f'T must be >= 1, got {self.T}')

        if self.obs_noise < 0 or self.sigma_g < 0:
            raise ValidationError('obs_noise and sigma_g must be >= 0')

        shift = self.regime_shift
        if shift is not None:
            if not 1 <= shift.step < self.T:
                msg = f'Regime shift step {shift.step} outside 1..{self.T - 1}'
                raise ValidationError(msg)

            if np.shape(shift.A) != self.lgssm.A.shape:
                raise ValidationError('Replacement A has the wrong shape')

    def model_params(self) -> LgssmParams:
        """LG-SSM of the noisy observations seen by inference"""
        R = self.lgssm.R + self.obs_noise**2 * np.eye(self.lgssm.d_x)
        return self.lgssm.replace(R=R)

    def deformation(self, x: np.ndarray) -> np.ndarray:
        return _deformation(self.basis, x, self.sigma_g, self.n_squarings)


def make_scenario(
    seed: int = 0,
    d_z: int = 16,
    d_x: int = 8,
    T: int = 275,
    shape: tuple[int, int] = (64, 64),
    sigma_g: float = 2.0,
    obs_noise: float = 0.05,
    shift_step: int | None = None,
    shift_angle: float = 0.1,
    lgssm: LgssmParams | None = None,
) -> SynthScenario:
    if lgssm is None:
        lgssm = default_lgssm(d_z, d_x, seed)

    regime_shift = None
    excursion = motion_excursion(lgssm, T)
    if shift_step is not None:
        shifted = lgssm.replace(A=rotate_dynamics(lgssm.A, shift_angle))
        regime_shift = RegimeShift(shift_step, shifted.A)
        excursion = np.maximum(excursion, motion_excursion(shifted, T))

    unit_basis = make_basis(shape, lgssm.d_x, seed, sigma_g)
    basis = calibrate_basis(unit_basis, excursion, sigma_g, seed)
    return SynthScenario(
        lgssm=lgssm,
        basis=basis,
        phantom=make_phantom(*shape, seed=seed),
        T=T,
        sigma_g=sigma_g,
        obs_noise=obs_noise,
        regime_shift=regime_shift,
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class SynthOutput:
    latents: np.ndarray
    # Noise-free motion variables x_t that generate the frames
    motion: np.ndarray
    # x_t perturbed by obs_noise, the input to inference
    observations: np.ndarray
    frames: np.ndarray
    deformations: np.ndarray
    masks: np.ndarray


def synth_sequence(s: SynthScenario) -> SynthOutput:
    seed = derive_seed(s.seed, STREAM_SIMULATE)
    shift = s.regime_shift
    if shift is None:
        latents, motion = simulate(s.lgssm, s.T, seed)
    else:
        z_pre, x_pre = simulate(s.lgssm, shift.step, seed)
        z_post, x_post = simulate(
            s.lgssm.replace(A=shift.A),
            s.T - shift.step,
            derive_seed(s.seed, STREAM_SIMULATE, 1),
            initial_state=z_pre[-1],
        )
        latents = np.concatenate([z_pre, z_post])
        motion = np.concatenate([x_pre, x_post])

    rng = make_rng(s.seed, STREAM_OBS_NOISE)
    observations = motion + s.obs_noise * rng.standard_normal(motion.shape)

    H, W = s.phantom.shape
    frames = np.empty((s.T, H, W), dtype=s.phantom.image.dtype)
    deformations = np.empty((s.T, H, W, 2))
    masks = np.empty((s.T, H, W), dtype=s.phantom.labels.dtype)
    for t in range(s.T):
        phi = s.deformation(motion[t])
        min_det = float(jacobian_det(phi).min())
        if min_det <= 0:
            raise DiffeomorphismError(min_det, t)

        deformations[t] = phi
        frames[t] = warp(s.phantom.image, phi)
        masks[t] = warp(s.phantom.labels, phi, 'nearest')

    return SynthOutput(
        latents, motion, observations, frames, deformations, masks
    )


def _region_scores(
    labels0: np.ndarray, phi: np.ndarray, truth: np.ndarray
) -> dict[str, float]:
    estimate = warp(labels0, phi, 'nearest')
    scores = {}
    for name, label in REGIONS.items():
        a = estimate == label
        b = truth == label
        scores[f'dice_{name}'] = dice(a, b)
        scores[f'hd95_{name}'] = hd95(a, b) if a.any() and b.any() else np.nan

    return scores


@dataclass(frozen=True, eq=False)
class ImputationReport:
    stride: int
    dice: float
    dice_ring: float
    dice_pool: float
    hd95: float
    rmse: float
    # Mean Dice at stride 1 minus mean Dice at this stride
    dice_degradation: float
    # Region-averaged scores of every frame, observed ones included
    frame_dice: np.ndarray
    frame_hd95: np.ndarray

    def to_dict(self) -> dict:
        """Summary scores, without the per-frame arrays"""
        return {
            k: getattr(self, k)
            for k in (
                'stride',
                'dice',
                'dice_ring',
                'dice_pool',
                'hd95',
                'rmse',
                'dice_degradation',
            )
        }


def _impute_scores(s: SynthScenario, output: SynthOutput, stride: int) -> dict:
    observed = np.arange(s.T) % stride == 0
    imputed = impute(s.model_params(), ObsSeq(output.observations, observed))

    per_frame = [
        _region_scores(
            s.phantom.labels, s.deformation(imputed.means[t]), output.masks[t]
        )
        for t in range(s.T)
    ]
    columns = {k: np.array([f[k] for f in per_frame]) for k in per_frame[0]}
    mean = {k: float(np.nanmean(v)) for k, v in columns.items()}
    return {
        'dice_ring': mean['dice_ring'],
        'dice_pool': mean['dice_pool'],
        'dice': 0.5 * (mean['dice_ring'] + mean['dice_pool']),
        'hd95': 0.5 * (mean['hd95_ring'] + mean['hd95_pool']),
        'rmse': rmse(imputed.means, output.motion),
        'frame_dice': 0.5 * (columns['dice_ring'] + columns['dice_pool']),
        'frame_hd95': 0.5 * (columns['hd95_ring'] + columns['hd95_pool']),
    }


def run_imputation_experiment(
    s: SynthScenario, stride: int, output: SynthOutput | None = None
) -> ImputationReport:
    """Impute every stride-th observation and score the warped labels"""
    if stride < 1 or s.T < 3 * stride:
        msg = f'Stride {stride} needs T >= {3 * stride}, got T={s.T}'
        raise PreconditionError(msg)

    if output is None:
        output = synth_sequence(s)

    scores = _impute_scores(s, output, stride)
    if stride == 1:
        reference = scores
    else:
        reference = _impute_scores(s, output, 1)

    return ImputationReport(
        stride=stride,
        dice_degradation=reference['dice'] - scores['dice'],
        **scores,
    )


@dataclass(frozen=True)
class OnlineReport:
    adapted_loglik: float
    frozen_loglik: float
    adapted_rmse: float
    frozen_rmse: float
    adapted_dice: float
    frozen_dice: float

    @property
    def loglik_gain(self) -> float:
        return self.adapted_loglik - self.frozen_loglik

    def to_dict(self) -> dict:
        return {**asdict(self), 'loglik_gain': self.loglik_gain}


def _forecast_dice(
    s: SynthScenario,
    params: LgssmParams,
    past: ObsSeq,
    truth: np.ndarray,
    steps: int,
) -> float:
    last = kalman_filter(params, past).filtered[len(past) - 1]
    x_hat = forecast(params, last, steps).observations.means[-1]
    scores = _region_scores(s.phantom.labels, s.deformation(x_hat), truth)
    return float(np.mean([scores[f'dice_{name}'] for name in REGIONS]))


def run_online_experiment(
    s: SynthScenario,
    horizon: int = 75,
    forecast_steps: int = 50,
    adaptation_steps: int = 300,
    dice_step: int = 25,
    pretrain_iters: int = 50,
    pretrain_sequences: int = 20,
    cfg: LearnerConfig | None = None,
) -> OnlineReport:
    """Compare moving-horizon adaptation against frozen parameters

    Parameters are pre-trained, starting from the generating model, on
    the observations before the regime shift (or before the adaptation
    period, without a shift) and on `pretrain_sequences` independent
    sequences of the same length from the pre-shift model. The
    adapted and frozen copies then stream `adaptation_steps`
    observations, and both forecast the next `forecast_steps`
    observations from the last `horizon` ones.
    """
    if cfg is None:
        cfg = LearnerConfig(horizon=horizon)

    if s.regime_shift is not None:
        boundary = s.regime_shift.step
    else:
        boundary = s.T - adaptation_steps - forecast_steps

    required = max(boundary, 1) + adaptation_steps + forecast_steps
    if s.T < required:
        msg = (
            f'The online experiment needs T >= {required} (pre-training '
            f'+ {adaptation_steps} adaptation + {forecast_steps} forecast '
            f'steps), got T={s.T}'
        )
        raise PreconditionError(msg)

    if horizon > boundary + adaptation_steps:
        msg = f'Horizon {horizon} is longer than the observed prefix'
        raise PreconditionError(msg)

    if not 1 <= dice_step <= forecast_steps:
        raise ValidationError(f'dice_step must be in 1..{forecast_steps}')

    output = synth_sequence(s)
    obs = output.observations

    pre_shift = s.model_params()
    dataset = [ObsSeq(obs[:boundary])]
    for k in range(pretrain_sequences):
        seed = derive_seed(s.seed, STREAM_PRETRAIN, k)
        dataset.append(ObsSeq(simulate(pre_shift, boundary, seed)[1]))

    pretrained = fit_offline(
        ParamVector.from_params(pre_shift),
        dataset,
        cfg.replace(max_iters=pretrain_iters),
    ).params

    adapted = OnlineState.start(pretrained, cfg.replace(horizon=horizon))
    frozen = OnlineState.start(
        pretrained, cfg.replace(horizon=horizon, inner_steps_per_sample=0)
    )
    origin = boundary + adaptation_steps
    for t in range(boundary, origin):
        online_step(adapted, obs[t])
        online_step(frozen, obs[t])

    past = ObsSeq(obs[origin - horizon : origin])
    future = ObsSeq(obs[origin : origin + forecast_steps])
    truth = output.masks[origin + dice_step - 1]

    results = {}
    for name, state in (('adapted', adapted), ('frozen', frozen)):
        params = state.params.to_params()
        score = evaluate_forecast(params, past, future)
        results[f'{name}_loglik'] = score.loglik
        results[f'{name}_rmse'] = score.rmse
        results[f'{name}_dice'] = _forecast_dice(
            s, params, past, truth, dice_step
        )

    report = OnlineReport(**results)
    logger.info(f'Online experiment seed {s.seed}: {report}')
    return report

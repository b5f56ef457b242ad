"""Value types of the linear Gaussian state-space model

The model is

    z_0 ~ N(mu0, Sigma0)
    z_t = A z_{t-1} + w_t,    w_t ~ N(0, Q)
    x_t = C z_t + v_t,        v_t ~ N(0, R)

with observations x_1, ..., x_T. Sequences are stored 0-indexed, so row
0 of an ObsSeq is x_1.
"""

from dataclasses import dataclass, field

import numpy as np

from motionssm.model.core.linalg import check_covariance, symmetrize
from motionssm.model.serializable import Serializable, ValidationError


def _as_matrix(value, name: str, shape: tuple[int, int]) -> np.ndarray:
    m = np.array(value, dtype=np.float64)
    if m.shape != shape:
        msg = f'{name} has shape {m.shape}, expected {shape}'
        raise ValidationError(msg)

    if not np.all(np.isfinite(m)):
        raise ValidationError(f'{name} contains non-finite values')

    return m


@dataclass(frozen=True, eq=False)
class LgssmParams(Serializable):
    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    _attrs_to_serialize = ['A', 'Q', 'C', 'R', 'mu0', 'Sigma0']

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        C = np.array(self.C, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            msg = f'A must be a non-empty square matrix, got shape {A.shape}'
            raise ValidationError(msg)

        d_z = A.shape[0]
        if C.ndim != 2 or C.shape[1] != d_z or C.shape[0] < 1:
            msg = f'C must have shape (d_x, {d_z}), got shape {C.shape}'
            raise ValidationError(msg)

        d_x = C.shape[0]
        values = {
            'A': _as_matrix(A, 'A', (d_z, d_z)),
            'Q': _as_matrix(self.Q, 'Q', (d_z, d_z)),
            'C': _as_matrix(C, 'C', (d_x, d_z)),
            'R': _as_matrix(self.R, 'R', (d_x, d_x)),
            'mu0': _as_matrix(
                np.ravel(self.mu0)[:, None], 'mu0', (d_z, 1)
            ).ravel(),
            'Sigma0': _as_matrix(self.Sigma0, 'Sigma0', (d_z, d_z)),
        }
        for name in ('Q', 'R', 'Sigma0'):
            check_covariance(values[name], name)

        for k, v in values.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def d_z(self) -> int:
        return self.A.shape[0]

    @property
    def d_x(self) -> int:
        return self.C.shape[0]

    def replace(self, **kwargs) -> 'LgssmParams':
        d = {k: getattr(self, k) for k in self._attrs_to_serialize}
        d.update(kwargs)
        return LgssmParams(**d)

    @classmethod
    def from_serialized(cls, d: dict) -> 'LgssmParams':
        cls.check_serialized_keys(d, require_all=True)
        return cls(**d)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LgssmParams):
            return NotImplemented

        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in self._attrs_to_serialize
        )


@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianSeq:
    """T Gaussians stored as stacked (T, d) means and (T, d, d) covs"""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        if self.means.ndim != 2 or self.covs.shape != (
            *self.means.shape,
            self.means.shape[1],
        ):
            msg = (
                f'Inconsistent GaussianSeq shapes: means {self.means.shape}, '
                f'covs {self.covs.shape}'
            )
            raise ValidationError(msg)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, t: int) -> Gaussian:
        return Gaussian(self.means[t], self.covs[t])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def empty(cls, length: int, dim: int) -> 'GaussianSeq':
        return cls(np.zeros((length, dim)), np.zeros((length, dim, dim)))


@dataclass(frozen=True, eq=False)
class ObsSeq:
    """Observations x_t with a per-step availability mask

    Rows whose `observed` flag is False are never read.
    """

    values: np.ndarray
    observed: np.ndarray = None
    t0_index: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]

        if values.ndim != 2:
            msg = f'Observations must be (T, d_x), got shape {values.shape}'
            raise ValidationError(msg)

        if self.observed is None:
            observed = np.ones(values.shape[0], dtype=bool)
        else:
            observed = np.array(self.observed, dtype=bool)

        if observed.shape != (values.shape[0],):
            msg = (
                f'Observed mask has shape {observed.shape}, expected '
                f'({values.shape[0]},)'
            )
            raise ValidationError(msg)

        if not np.all(np.isfinite(values[observed])):
            raise ValidationError('Observed rows must be finite')

        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'observed', observed)

    @classmethod
    def from_array(cls, values, t0_index: int = 0) -> 'ObsSeq':
        """Build from an array where rows containing NaN are missing"""
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]

        observed = ~np.any(np.isnan(values), axis=1)
        return cls(values, observed, t0_index)

    def to_array(self) -> np.ndarray:
        """Inverse of from_array: missing rows become NaN"""
        out = self.values.copy()
        out[~self.observed] = np.nan
        return out

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def d_x(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(np.count_nonzero(self.observed))

    def window(self, start: int, stop: int) -> 'ObsSeq':
        return ObsSeq(
            self.values[start:stop],
            self.observed[start:stop],
            self.t0_index + start,
        )

    def with_mask(self, observed) -> 'ObsSeq':
        return ObsSeq(self.values, observed, self.t0_index)

    @staticmethod
    def concatenate(first: 'ObsSeq', second: 'ObsSeq') -> 'ObsSeq':
        return ObsSeq(
            np.concatenate([first.values, second.values]),
            np.concatenate([first.observed, second.observed]),
            first.t0_index,
        )


@dataclass(frozen=True, eq=False)
class FilterResult:
    predicted: GaussianSeq
    filtered: GaussianSeq
    per_step_loglik: np.ndarray
    loglik: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'loglik', float(np.sum(self.per_step_loglik)))


@dataclass(frozen=True, eq=False)
class SmoothResult:
    smoothed: GaussianSeq
    # Cov(z_{t+1}, z_t | x_{1:T}) for t = 0 .. T-2
    pairwise_cov: np.ndarray
    # Smoother gains J_t = P_t A^T (P_{t+1|t})^{-1}
    gains: np.ndarray


@dataclass(frozen=True, eq=False)
class ForecastResult:
    states: GaussianSeq
    observations: GaussianSeq

    def __len__(self) -> int:
        return len(self.states)


def observation_marginals(params: LgssmParams, states: GaussianSeq):
    """Map state marginals to the implied marginals of x_t"""
    C, R = params.C, params.R
    means = states.means @ C.T
    covs = np.einsum('ij,tjk,lk->til', C, states.covs, C) + R
    return GaussianSeq(means, np.array([symmetrize(c) for c in covs]))

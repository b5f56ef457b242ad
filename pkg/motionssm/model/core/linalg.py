import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, eigh

from motionssm.model.core.errors import NotPositiveDefiniteError
from motionssm.model.serializable import ValidationError

LOG_2PI = np.log(2 * np.pi)

# Relative jitter added to the diagonal when a Cholesky factorization
# fails, escalated by 10x per attempt.
JITTER_SCALE = 1e-12
JITTER_ATTEMPTS = 3

# Tolerances for validating supplied covariances
SYMMETRY_TOL = 1e-10
EIGENVALUE_TOL = 1e-10


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


class CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix"""

    def __init__(self, lower: np.ndarray):
        self.lower = lower

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.lower, True), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        return symmetrize(self.solve(np.eye(self.dim)))

    def logdet(self) -> float:
        return 2.0 * np.sum(np.log(np.diag(self.lower)))

    def logpdf(self, residual: np.ndarray) -> float:
        """Log-density of N(0, M) at residual, M being the factored matrix"""
        quad = residual @ self.solve(residual)
        return -0.5 * (self.dim * LOG_2PI + self.logdet() + quad)


def cholesky_with_jitter(
    m: np.ndarray, what: str = 'matrix', step: int | None = None
) -> CholeskyFactor:
    try:
        return CholeskyFactor(cholesky(m, lower=True, check_finite=True))
    except LinAlgError:
        pass

    d = m.shape[0]
    trace = float(np.trace(m))
    jitter = JITTER_SCALE * trace / d if trace > 0 else JITTER_SCALE
    eye = np.eye(d)
    for _ in range(JITTER_ATTEMPTS):
        try:
            lower = cholesky(m + jitter * eye, lower=True)
            return CholeskyFactor(lower)
        except LinAlgError:
            jitter *= 10

    raise NotPositiveDefiniteError(what, step)


def psd_sqrt(m: np.ndarray, what: str = 'covariance') -> np.ndarray:
    """Return S with S @ S.T == m for a positive semi-definite m

    Uses a Cholesky factor when possible. Singular matrices (such as a
    zero process noise) fall back to an eigendecomposition.
    """
    if not np.any(m):
        return np.zeros_like(m)

    try:
        return cholesky(m, lower=True)
    except LinAlgError:
        pass

    eigvals, eigvecs = eigh(symmetrize(m))
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    if eigvals.min() < -EIGENVALUE_TOL * scale:
        raise NotPositiveDefiniteError(what)

    return eigvecs * np.sqrt(np.clip(eigvals, 0, None))


def check_covariance(m: np.ndarray, name: str):
    """Raise ValidationError if m is not symmetric positive semi-definite"""
    if not np.all(np.isfinite(m)):
        raise ValidationError(f'{name} contains non-finite values')

    if np.max(np.abs(m - m.T), initial=0.0) >= SYMMETRY_TOL:
        raise ValidationError(f'{name} is not symmetric')

    if m.size and np.linalg.eigvalsh(symmetrize(m)).min() < -EIGENVALUE_TOL:
        raise ValidationError(f'{name} is not positive semi-definite')

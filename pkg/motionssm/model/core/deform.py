"""Stationary velocity fields and the deformations they generate

Fields are H x W x 2 arrays in pixel units. Component 0 displaces rows
and component 1 displaces columns. A deformation is stored as its
displacement u, with phi(x) = x + u(x), so the zero field is the
identity.
"""

import math

import numba
import numpy as np
from scipy import ndimage

from motionssm.model.serializable import ValidationError
from motionssm.typing import VectorField

DEFAULT_SQUARINGS = 4
WARP_MODES = ('bilinear', 'nearest')


@numba.njit(cache=True, nogil=True)
def _bilinear_sample(image, rows, cols, out):
    # Coordinates are clamped to the image, which makes samples outside
    # the domain take the value of the nearest border pixel.
    h, w = image.shape
    for i in range(rows.shape[0]):
        for j in range(rows.shape[1]):
            r = min(max(rows[i, j], 0.0), h - 1.0)
            c = min(max(cols[i, j], 0.0), w - 1.0)
            r0 = min(int(math.floor(r)), h - 2)
            c0 = min(int(math.floor(c)), w - 2)
            dr = r - r0
            dc = c - c0
            out[i, j] = (
                image[r0, c0] * (1.0 - dr) * (1.0 - dc)
                + image[r0, c0 + 1] * (1.0 - dr) * dc
                + image[r0 + 1, c0] * dr * (1.0 - dc)
                + image[r0 + 1, c0 + 1] * dr * dc
            )


@numba.njit(cache=True, nogil=True)
def _nearest_sample(image, rows, cols, out):
    h, w = image.shape
    for i in range(rows.shape[0]):
        for j in range(rows.shape[1]):
            r = int(math.floor(rows[i, j] + 0.5))
            c = int(math.floor(cols[i, j] + 0.5))
            r = min(max(r, 0), h - 1)
            c = min(max(c, 0), w - 1)
            out[i, j] = image[r, c]


def _check_field(field: np.ndarray, name: str = 'field') -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != 2:
        msg = f'{name} must have shape (H, W, 2), got {field.shape}'
        raise ValidationError(msg)

    if field.shape[0] < 2 or field.shape[1] < 2:
        msg = f'{name} must be at least 2 x 2, got {field.shape[:2]}'
        raise ValidationError(msg)

    if not np.all(np.isfinite(field)):
        raise ValidationError(f'{name} contains non-finite values')

    return field


def _sample_coordinates(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = phi.shape[:2]
    rows, cols = np.meshgrid(
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing='ij',
    )
    return rows + phi[..., 0], cols + phi[..., 1]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2 * sigma**2))
    return kernel / kernel.sum()


def gaussian_smooth(v: VectorField, sigma_g: float) -> VectorField:
    """Separable Gaussian smoothing of each component, reflect borders"""
    v = _check_field(v, 'velocity field')
    if sigma_g < 0:
        raise ValidationError(f'sigma_g must be >= 0, got {sigma_g}')

    if sigma_g == 0:
        return v.copy()

    kernel = gaussian_kernel(sigma_g)
    out = np.empty_like(v)
    for k in range(2):
        smoothed = ndimage.correlate1d(
            v[..., k], kernel, axis=0, mode='reflect'
        )
        out[..., k] = ndimage.correlate1d(
            smoothed, kernel, axis=1, mode='reflect'
        )

    return out


def warp(img: np.ndarray, phi: VectorField, mode: str = 'bilinear'):
    """Resample img at phi(x): output(x) = img(x + u(x))

    Bilinear mode returns the input's float dtype (float64 for other
    inputs); nearest mode keeps the input dtype, for label masks.
    """
    if mode not in WARP_MODES:
        msg = f'Unknown warp mode {mode!r}, expected one of {WARP_MODES}'
        raise ValidationError(msg)

    img = np.asarray(img)
    phi = _check_field(phi, 'deformation')
    if img.shape != phi.shape[:2]:
        msg = f'Image shape {img.shape} does not match field {phi.shape}'
        raise ValidationError(msg)

    rows, cols = _sample_coordinates(phi)
    if mode == 'nearest':
        out = np.empty_like(img)
        _nearest_sample(np.ascontiguousarray(img), rows, cols, out)
        return out

    out = np.empty(img.shape, dtype=np.float64)
    _bilinear_sample(img.astype(np.float64), rows, cols, out)
    if np.issubdtype(img.dtype, np.floating):
        return out.astype(img.dtype, copy=False)

    return out


def compose(phi_a: VectorField, phi_b: VectorField) -> VectorField:
    """Displacement of phi_a o phi_b: u_b(x) + u_a(x + u_b(x))"""
    phi_a = _check_field(phi_a, 'phi_a')
    phi_b = _check_field(phi_b, 'phi_b')
    if phi_a.shape != phi_b.shape:
        msg = f'Field shapes differ: {phi_a.shape} != {phi_b.shape}'
        raise ValidationError(msg)

    rows, cols = _sample_coordinates(phi_b)
    out = np.empty_like(phi_b)
    for k in range(2):
        _bilinear_sample(
            np.ascontiguousarray(phi_a[..., k]), rows, cols, out[..., k]
        )

    return phi_b + out


def exp_svf(v: VectorField, n_squarings: int = DEFAULT_SQUARINGS):
    """Exponentiate a stationary velocity field by scaling and squaring"""
    v = _check_field(v, 'velocity field')
    if n_squarings < 0:
        msg = f'n_squarings must be >= 0, got {n_squarings}'
        raise ValidationError(msg)

    u = v / 2**n_squarings
    for _ in range(n_squarings):
        u = compose(u, u)

    return u


def jacobian_det(phi: VectorField) -> np.ndarray:
    """Per-pixel determinant of the Jacobian of x + u(x)

    Central differences in the interior, one-sided at the borders.
    """
    phi = _check_field(phi, 'deformation')
    if phi.shape[0] < 3 or phi.shape[1] < 3:
        msg = f'Jacobian needs at least 3 x 3 fields, got {phi.shape[:2]}'
        raise ValidationError(msg)

    du0_d0, du0_d1 = np.gradient(phi[..., 0])
    du1_d0, du1_d1 = np.gradient(phi[..., 1])
    return (1 + du0_d0) * (1 + du1_d1) - du0_d1 * du1_d0

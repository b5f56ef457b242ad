import numpy as np
from scipy import ndimage

from motionssm.model.serializable import ValidationError
from motionssm.typing import Mask

# 8-connectivity
BOUNDARY_STRUCTURE = np.ones((3, 3), dtype=bool)

LCC_EPSILON = 1e-5


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        msg = f'Shape mismatch: {a.shape} != {b.shape}'
        raise ValidationError(msg)


def dice(a: Mask, b: Mask) -> float:
    """Dice overlap of two boolean masks. Two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_same_shape(a, b)

    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0

    return 2.0 * np.count_nonzero(a & b) / total


def boundary(mask: Mask) -> np.ndarray:
    """Foreground pixels with at least one background 8-neighbor

    Pixels outside the image count as background.
    """
    eroded = ndimage.binary_erosion(
        mask, structure=BOUNDARY_STRUCTURE, border_value=0
    )
    return mask & ~eroded


def _directed_boundary_distances(
    a: np.ndarray, b: np.ndarray, spacing: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_same_shape(a, b)
    if not a.any() or not b.any():
        raise ValidationError('Distance metrics need non-empty masks')

    boundary_a = boundary(a)
    boundary_b = boundary(b)

    # Distance from every pixel to the nearest boundary pixel of each mask
    to_b = ndimage.distance_transform_edt(~boundary_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~boundary_a, sampling=spacing)
    return to_b[boundary_a], to_a[boundary_b]


def hd95(
    a: np.ndarray, b: np.ndarray, spacing: tuple[float, float] = (1.0, 1.0)
) -> float:
    """95th-percentile Hausdorff distance between mask boundaries

    The larger of the two directed 95th percentiles (linear
    interpolation), in the units of `spacing` (row, column).
    """
    a_to_b, b_to_a = _directed_boundary_distances(a, b, spacing)
    return float(
        max(np.percentile(a_to_b, 95), np.percentile(b_to_a, 95))
    )


def hausdorff(
    a: np.ndarray, b: np.ndarray, spacing: tuple[float, float] = (1.0, 1.0)
) -> float:
    a_to_b, b_to_a = _directed_boundary_distances(a, b, spacing)
    return float(max(a_to_b.max(), b_to_a.max()))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def lcc(a: np.ndarray, b: np.ndarray, window: int = 9) -> float:
    """Mean squared local normalized cross-correlation

    Windows are centered on each pixel and clipped to the image, so
    border pixels use the pixels of their window that lie inside.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if window < 1 or window % 2 == 0:
        raise ValidationError(f'Window must be a positive odd size: {window}')

    if a.ndim != 2 or window > min(a.shape):
        msg = f'Window {window} does not fit images of shape {a.shape}'
        raise ValidationError(msg)

    kernel = np.ones((window, window))

    def box_sum(img):
        return ndimage.correlate(img, kernel, mode='constant', cval=0.0)

    count = box_sum(np.ones_like(a))
    sum_a = box_sum(a)
    sum_b = box_sum(b)

    cross = box_sum(a * b) - sum_a * sum_b / count
    var_a = box_sum(a * a) - sum_a**2 / count
    var_b = box_sum(b * b) - sum_b**2 / count

    cc = cross**2 / (var_a * var_b + LCC_EPSILON)
    return float(np.mean(cc))

from dataclasses import dataclass

import numpy as np

from motionssm.model.serializable import ValidationError


@dataclass(frozen=True, eq=False)
class Frame:
    """A 2D scalar image, with an optional integer label mask"""

    image: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.ndim != 2 or min(image.shape) < 2:
            msg = f'Frames must be 2D and at least 2 x 2, got {image.shape}'
            raise ValidationError(msg)

        if not np.all(np.isfinite(image)):
            raise ValidationError('Frame intensities must be finite')

        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != image.shape:
                msg = (
                    f'Label mask shape {labels.shape} does not match the '
                    f'image shape {image.shape}'
                )
                raise ValidationError(msg)

            if not np.issubdtype(labels.dtype, np.integer):
                raise ValidationError('Label masks must be integer arrays')

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def region(self, label: int) -> np.ndarray:
        if self.labels is None:
            raise ValidationError('Frame has no label mask')

        return self.labels == label


@dataclass(frozen=True, eq=False)
class FrameSeq:
    """Frames y_1..y_T of shape (T, H, W) next to their reference y_0"""

    frames: np.ndarray
    reference: Frame

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[1:] != self.reference.shape:
            msg = (
                f'Frames of shape {frames.shape} do not match the reference '
                f'shape {self.reference.shape}'
            )
            raise ValidationError(msg)

    def __len__(self) -> int:
        return self.frames.shape[0]

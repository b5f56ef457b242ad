import os

from typing import Literal
import numpy as np

PathLike = str | bytes | os.PathLike

# H x W x 2 fields. Component 0 is the row displacement, component 1
# the column displacement (row-major image convention).
VectorField = np.ndarray[tuple[int, int, Literal[2]], np.dtype[np.float64]]

Mask = np.ndarray[tuple[int, int], np.dtype[np.bool_]]

"""CSV reports

All reports are comma-separated with a header row. Floats are written
with 17 significant digits so values read back are identical.
"""

import numpy as np
import pandas as pd

from motionssm.typing import PathLike

FLOAT_FORMAT = '%.17g'


def write_csv(df: pd.DataFrame, path: PathLike):
    df.to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n'
    )


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')


def loss_curve(history: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {
            'iteration': np.arange(len(history)),
            'objective': history,
            'best_objective': np.maximum.accumulate(history),
        }
    )


def aggregate(raw: pd.DataFrame, key: str = 'seed') -> pd.DataFrame:
    """Median and interquartile range of every metric column

    NaN entries are ignored. Quantiles use linear interpolation.
    """
    metrics = raw.drop(columns=[key], errors='ignore')
    stats = pd.DataFrame(
        {
            'metric': metrics.columns,
            'median': metrics.median().to_numpy(),
            'q25': metrics.quantile(0.25).to_numpy(),
            'q75': metrics.quantile(0.75).to_numpy(),
            'count': metrics.count().to_numpy(),
        }
    )
    return stats

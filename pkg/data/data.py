import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from data.simulator import SimulatedPath
from sdde.exceptions import DataError
from sdde.likelihood import ObservationSeries

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
OBSERVATION_COLUMNS = ["i", "t", "x"]


class SeriesHelper:
    @staticmethod
    def write_table(df: pd.DataFrame, path, verbose: bool = False) -> Path:
        path = Path(path)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        if verbose:
            logger.info("wrote %d rows to %s", len(df), path)
        return path

    @staticmethod
    def read_table(path) -> pd.DataFrame:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
        return pd.read_csv(path)

    @staticmethod
    def observations_frame(series: ObservationSeries) -> pd.DataFrame:
        i = np.arange(1, series.n + 1)
        return pd.DataFrame({"i": i, "t": series.delta * i, "x": series.x})

    @staticmethod
    def write_observations(series: ObservationSeries, path, verbose: bool = False) -> Path:
        return SeriesHelper.write_table(SeriesHelper.observations_frame(series), path, verbose)

    @staticmethod
    def write_path(path_obj: SimulatedPath, path, verbose: bool = False) -> Path:
        return SeriesHelper.write_table(path_obj.to_frame(), path, verbose)

    @staticmethod
    def read_observations(path, delta: Optional[float] = None) -> ObservationSeries:
        """Read an ``i,t,x`` file; delta comes from the time column unless given."""
        df = SeriesHelper.read_table(path)
        missing = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
        if "x" in missing or (delta is None and "t" in missing):
            raise DataError(f"{path}: missing columns {missing}")
        if "i" in df.columns:
            i = df["i"].to_numpy()
            if not np.array_equal(i, np.arange(i[0], i[0] + len(i))):
                raise DataError(f"{path}: observations must be contiguous (no gaps in i)")
        if delta is None:
            t = df["t"].to_numpy(dtype=float)
            steps = np.diff(t)
            if len(steps) == 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
                raise DataError(f"{path}: observation times are not equidistant")
            delta = float(steps[0])
        return ObservationSeries.of(df["x"].to_numpy(dtype=float), delta)

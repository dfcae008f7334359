"""
Results Service Module

Owns every file a run writes. Summaries are JSON (sorted keys, shortest
round-trip float repr); tables are CSV written by pandas with 17 significant
digits in a fixed column order. Each save_* has a load_* that reads the file
back into the same values.
"""

from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Mapping, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SUMMARY_FILE = 'summary.json'
SERIES_FILE = 'series.csv'
CONVERGENCE_FILE = 'convergence.csv'
COMPARISON_FILE = 'comparison.json'
PRICE_FILE = 'price.json'
ERROR_FILE = 'error.json'

SERIES_COLUMNS = ('t', 'mean_y', 'mean_z', 'mean_k_plus', 'mean_k_minus')


class ResultsStore:
    """Reads and writes the result files of one output directory."""

    def __init__(self, directory: str):
        self.directory = directory

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    # ---- JSON records -------------------------------------------------------

    def save_json(self, name: str, record: Mapping[str, Any]) -> str:
        os.makedirs(self.directory, exist_ok=True)
        path = self.path(name)
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(dumps(record))
        logger.info("Wrote %s", path)
        return path

    def load_json(self, name: str) -> Dict[str, Any]:
        with open(self.path(name), 'r', encoding='utf-8') as handle:
            return json.load(handle)

    def save_summary(self, record: Mapping[str, Any]) -> str:
        return self.save_json(SUMMARY_FILE, record)

    def save_comparison(self, record: Mapping[str, Any]) -> str:
        return self.save_json(COMPARISON_FILE, record)

    def save_price(self, record: Mapping[str, Any]) -> str:
        return self.save_json(PRICE_FILE, record)

    def save_error(self, record: Mapping[str, Any]) -> Optional[str]:
        """Best effort: a failing run may not be able to create its directory."""
        try:
            return self.save_json(ERROR_FILE, record)
        except OSError as exc:
            logger.error("Could not write %s: %s", self.path(ERROR_FILE), exc)
            return None

    # ---- CSV tables ---------------------------------------------------------

    def save_table(self, name: str, frame: pd.DataFrame) -> str:
        os.makedirs(self.directory, exist_ok=True)
        path = self.path(name)
        frame.to_csv(path, float_format='%.17g', index=False, lineterminator='\n')
        logger.info("Wrote %s (%d rows)", path, len(frame))
        return path

    def load_table(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path(name), float_precision='round_trip')

    def save_series(self, series: Mapping[str, np.ndarray]) -> str:
        frame = pd.DataFrame({column: np.asarray(series[column], dtype=float) for column in SERIES_COLUMNS},
                             columns=list(SERIES_COLUMNS))
        return self.save_table(SERIES_FILE, frame)

    def save_convergence(self, frame: pd.DataFrame) -> str:
        return self.save_table(CONVERGENCE_FILE, frame)


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(to_plain(record), sort_keys=True, indent=2) + '\n'


def to_plain(value: Any) -> Any:
    """Convert numpy scalars and arrays (recursively) to JSON-native values."""
    if isinstance(value, Mapping):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value

"""
Metric records and their CSV serialization with pandas.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import pandas as pd

from app.exceptions import NumericError, ResultsError

REPORT_COLUMNS = ['method', 'n_steps', 'mse_to_reference', 'mean_error', 'cov_frobenius_error', 'nfe']
ABLATION_COLUMNS = ['axis', 'value'] + REPORT_COLUMNS
FLOAT_FORMAT = '%.12e'


@dataclass
class MetricRecord:
    """Metrics of one method at one step count."""

    method: str
    n_steps: int
    mse_to_reference: float
    mean_error: float
    cov_frobenius_error: float
    nfe: int

    def __post_init__(self):
        for name in ('mse_to_reference', 'mean_error', 'cov_frobenius_error'):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise NumericError(f"{name} of {self.method} at N={self.n_steps} is {value}")
            setattr(self, name, value)

    def to_dict(self) -> dict:
        """Convert record to dictionary for serialization."""
        return {
            'method': self.method,
            'n_steps': self.n_steps,
            'mse_to_reference': self.mse_to_reference,
            'mean_error': self.mean_error,
            'cov_frobenius_error': self.cov_frobenius_error,
            'nfe': self.nfe,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricRecord':
        """Create MetricRecord from dictionary."""
        return cls(
            method=str(data['method']),
            n_steps=int(data['n_steps']),
            mse_to_reference=float(data['mse_to_reference']),
            mean_error=float(data['mean_error']),
            cov_frobenius_error=float(data['cov_frobenius_error']),
            nfe=int(data['nfe']),
        )


@dataclass
class MetricReport:
    """Per-N metric records of one method, ordered by step count."""

    method: str
    records: List[MetricRecord] = field(default_factory=list)

    def add(self, record: MetricRecord):
        if record.method != self.method:
            raise ResultsError(f"Record for '{record.method}' added to report of '{self.method}'")
        self.records.append(record)
        self.records.sort(key=lambda r: r.n_steps)

    @property
    def n_steps(self) -> List[int]:
        return [r.n_steps for r in self.records]

    def mse(self) -> List[float]:
        return [r.mse_to_reference for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records], columns=REPORT_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> List['MetricReport']:
        """Split a report table back into one report per method, keeping row order."""
        missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
        if missing:
            raise ResultsError(f"Report table missing required columns: {missing}")
        reports = {}
        for row in frame.to_dict('records'):
            record = MetricRecord.from_dict(row)
            reports.setdefault(record.method, cls(record.method)).add(record)
        return list(reports.values())


def reports_to_frame(reports: List[MetricReport]) -> pd.DataFrame:
    frames = [r.to_frame() for r in reports]
    if not frames:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def write_csv(frame: pd.DataFrame, path, encoding: str = 'utf-8') -> Path:
    """Write a result table with fixed float formatting and '\\n' line endings."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, encoding=encoding,
                     float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise ResultsError(f"Failed to write {path}: {e}")
    return path

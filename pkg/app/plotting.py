"""
Static SVG plots of error against step count.
"""

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from app.exceptions import ResultsError, ValidationError  # noqa: E402
from app.records import FLOAT_FORMAT, MetricReport, reports_to_frame, write_csv  # noqa: E402

# fixed salt keeps SVG element ids stable between runs
_HASH_SALT = 'dualfast'


def emit_plot(reports: List[MetricReport], path, metric: str = 'mse_to_reference',
              title: str = None, encoding: str = 'utf-8') -> Path:
    """One curve per method on a log error axis; the data table goes next to it and into the SVG."""
    if not reports or not any(r.records for r in reports):
        raise ValidationError("Cannot plot an empty report")
    path = Path(path)
    frame = reports_to_frame(reports)
    table = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n')

    with plt.rc_context({'svg.hashsalt': _HASH_SALT, 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for report in reports:
            values = [getattr(r, metric) for r in report.records]
            ax.plot(report.n_steps, values, marker='o', label=report.method)
        ax.set_yscale('log')
        ax.set_xlabel('NFE')
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        ax.legend()
        ax.grid(True, which='both', alpha=0.3)
        fig.tight_layout()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format='svg', metadata={'Date': None, 'Description': table})
        except OSError as e:
            raise ResultsError(f"Failed to write {path}: {e}")
        finally:
            plt.close(fig)

    write_csv(frame, path.with_name(f"{path.stem}_data.csv"), encoding)
    return path

"""
Experiment orchestration: references, paired comparisons, ablations and convergence studies.
"""

import dataclasses
import json
import logging
import platform
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import pandas as pd
import scipy
import yaml

import app
from app.disentangle import ErrorCurve, emit_curve, run_disentangle
from app.dualfast import (
    MIX_DERIVED,
    MIX_LINEAR,
    attach,
    parse_mix_schedule,
    parse_tau,
)
from app.exceptions import ConfigurationError, ResultsError, ValidationError
from app.experiment_config import ExperimentConfig
from app.logger import SamplerLogger
from app.metrics import cov_frobenius_error, endpoint_error, fit_order, mean_error, paired_mse
from app.oracle import CountingOracle, ExactNoiseOracle, make_rng
from app.plotting import emit_plot
from app.records import ABLATION_COLUMNS, MetricRecord, MetricReport, reports_to_frame, write_csv
from app.reference_cache import ReferenceCache, ReferenceEntry, array_sha256, reference_key
from app.schedule import UNIFORM_LOGSNR
from app.settings import HarnessSettings
from app.solver import SolverConfig, TrajectoryRecord, sample

AXIS_C_SCHEDULE = 'c-schedule'
AXIS_TAU = 'tau'
AXIS_COEFFICIENT_MODE = 'coefficient-mode'
AXIS_DIFFERENCE = 'difference'
ABLATION_AXES = (AXIS_C_SCHEDULE, AXIS_TAU, AXIS_COEFFICIENT_MODE, AXIS_DIFFERENCE)

MSE_NOTE = ('MSE is averaged per dimension; its scale depends on the mixture, '
            'so only directional comparisons between methods are meaningful')


class ReportObserver(ABC):
    """Abstract observer interface."""

    @abstractmethod
    def update(self, report: MetricReport):
        """Called when a method's report is complete."""
        pass


class LoggingObserver(ReportObserver):
    """Observer that logs finished reports."""

    def update(self, report: MetricReport):
        try:
            logger = SamplerLogger.get_logger()
            for record in report.records:
                logger.info(
                    f"Report: {record.method} N={record.n_steps} "
                    f"mse={record.mse_to_reference:.6e} nfe={record.nfe}"
                )
        except RuntimeError:
            # Logger not initialized, skip logging
            pass


class AutoSaveObserver(ReportObserver):
    """Observer that rewrites the running report CSV after each method."""

    def __init__(self, experiment: 'Experiment'):
        self.experiment = experiment

    def update(self, report: MetricReport):
        try:
            self.experiment.save_reports(self.experiment.reports, 'reports_autosave.csv')
        except Exception as e:
            SamplerLogger.log(logging.ERROR, f"Auto-save failed: {str(e)}")


@dataclass
class AblationResult:
    """Reports of one ablation axis, one per value."""

    axis: str
    entries: List[Tuple[str, MetricReport]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for value, report in self.entries:
            for record in report.records:
                rows.append({'axis': self.axis, 'value': value, **record.to_dict()})
        return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


@dataclass
class ConvergenceResult:
    """Endpoint errors per family and the fitted order of each."""

    errors: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict)
    fits: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def slope(self, family: str) -> float:
        return self.fits[family][0]

    def to_frame(self) -> pd.DataFrame:
        rows = [{'family': f, 'n_steps': n, 'endpoint_error': e}
                for f, points in self.errors.items() for n, e in points]
        return pd.DataFrame(rows, columns=['family', 'n_steps', 'endpoint_error'])

    def summary_frame(self) -> pd.DataFrame:
        rows = [{'family': f, 'slope': s, 'r_squared': r} for f, (s, r) in self.fits.items()]
        return pd.DataFrame(rows, columns=['family', 'slope', 'r_squared'])


class Experiment:
    """Runs experiments for one configuration, with a reference cache and report observers."""

    def __init__(self, config: ExperimentConfig, settings: HarnessSettings,
                 output_dir: Optional[str] = None, workers: Optional[int] = None):
        """Initialize the experiment from its configuration and environment settings."""
        self.config = config
        self.settings = settings
        self.schedule = config.schedule
        self.mixture = config.mixture
        self.encoding = settings.get('DUALFAST_DEFAULT_ENCODING', 'utf-8')
        self.cache = ReferenceCache(settings['DUALFAST_CACHE_DIR'], self.encoding)
        self.output_dir = Path(output_dir or config.output_dir or settings['DUALFAST_OUTPUT_DIR'])
        self.workers = int(workers or config.workers or settings.get('DUALFAST_WORKERS', 1))
        self.observers: List[ReportObserver] = []
        self.reports: List[MetricReport] = []

        SamplerLogger.setup(settings)
        self._register_default_observers()

    def _register_default_observers(self):
        self.register_observer(LoggingObserver())
        if self.settings.get('DUALFAST_AUTO_SAVE', False):
            self.register_observer(AutoSaveObserver(self))

    def register_observer(self, observer: ReportObserver):
        self.observers.append(observer)

    def remove_observer(self, observer: ReportObserver):
        if observer in self.observers:
            self.observers.remove(observer)

    def _notify_observers(self, report: MetricReport):
        for observer in self.observers:
            try:
                observer.update(report)
            except Exception as e:
                SamplerLogger.log(logging.ERROR, f"Observer notification failed: {str(e)}")

    def oracle(self, exact: bool = False) -> CountingOracle:
        """A fresh counting wrapper around the configured (or the exact) oracle."""
        if exact:
            inner = ExactNoiseOracle(self.mixture, self.schedule)
        else:
            inner = self.config.oracle_for(self.schedule, self.mixture)
        return CountingOracle(inner)

    def initial_noise(self, batch: Optional[int] = None, seed: Optional[int] = None) -> np.ndarray:
        batch = self.config.batch if batch is None else batch
        seed = self.config.seed if seed is None else seed
        return make_rng(seed).standard_normal((batch, self.mixture.dim))

    def run_method(self, method: SolverConfig, n_steps: int, x_T: np.ndarray,
                   exact: bool = False) -> Tuple[TrajectoryRecord, int]:
        """Sample the batch from x_T; returns the trajectory and the counted NFE."""
        oracle = self.oracle(exact)
        grid = self.schedule.make_grid(n_steps, self.config.scheme)
        record = sample(self.schedule, oracle, self.mixture, method, grid, x_T=x_T)
        return record, oracle.count

    def reference_fields(self) -> dict:
        return {
            'schedule': self.schedule.to_dict(),
            'mixture': self.mixture.to_dict(),
            'oracle': self.config.oracle_spec,
            'seed': self.config.seed,
            'batch': self.config.batch,
            'n_ref': self.config.reference_n_steps,
            'family': self.config.reference_solver.family,
        }

    def build_reference(self, force: bool = False) -> ReferenceEntry:
        """Pseudo-ground truth: the reference solver at reference_n_steps on a uniform log-SNR grid."""
        fields = self.reference_fields()
        key = reference_key(fields)
        if not force:
            entry = self.cache.load(key)
            if entry is not None:
                return entry

        x_T = self.initial_noise()
        grid = self.schedule.make_grid(self.config.reference_n_steps, UNIFORM_LOGSNR)
        oracle = self.oracle()
        record = sample(self.schedule, oracle, self.mixture, self.config.reference_solver, grid, x_T=x_T)
        SamplerLogger.log(logging.INFO, f"Built reference {key[:12]} with {oracle.count} evaluations")
        return self.cache.store(key, fields, x_T, record.endpoint)

    def compare(self, methods: Optional[Sequence[SolverConfig]] = None,
                n_steps: Optional[Sequence[int]] = None,
                reference: Optional[ReferenceEntry] = None) -> List[MetricReport]:
        """Paired metrics of each method at each N against the reference endpoints."""
        methods = list(methods) if methods is not None else self.config.methods()
        n_steps = list(n_steps) if n_steps is not None else self.config.n_steps
        if not methods or not n_steps:
            raise ValidationError("compare needs at least one method and one step count")
        reference = reference if reference is not None else self.build_reference()
        self._check_pairing(reference)

        def run(unit):
            method, n = unit
            record, nfe = self.run_method(method, n, reference.x_T)
            x = record.endpoint
            return MetricRecord(
                method=method.label(),
                n_steps=n,
                mse_to_reference=paired_mse(x, reference.x_ref),
                mean_error=mean_error(x, self.mixture),
                cov_frobenius_error=cov_frobenius_error(x, self.mixture),
                nfe=nfe,
            )

        units = [(m, n) for m in methods for n in n_steps]
        records = self._map(run, units)
        reports = []
        for i, method in enumerate(methods):
            report = MetricReport(method.label())
            for record in records[i * len(n_steps):(i + 1) * len(n_steps)]:
                report.add(record)
            reports.append(report)
            self.reports.append(report)
            self._notify_observers(report)
        return reports

    def _check_pairing(self, reference: ReferenceEntry):
        fields = reference.fields
        if fields.get('batch') != self.config.batch or fields.get('seed') != self.config.seed:
            raise ConfigurationError(
                f"Reference was built for batch={fields.get('batch')}, seed={fields.get('seed')}; "
                f"experiment uses batch={self.config.batch}, seed={self.config.seed}"
            )
        if reference.x_T_sha256 != array_sha256(self.initial_noise()):
            raise ConfigurationError("Reference initial noises differ from this experiment's")

    def ablation_methods(self, axis: str, values: Sequence[str],
                         base: Optional[SolverConfig] = None) -> List[Tuple[str, SolverConfig]]:
        """Method variants that differ from the corrected base solver in one setting."""
        if axis not in ABLATION_AXES:
            raise ValidationError(f"Unknown ablation axis '{axis}', expected one of {ABLATION_AXES}")
        if not values:
            raise ValidationError(f"No values given for ablation axis '{axis}'")
        base = base or SolverConfig.from_dict(self.config['solver'])
        base = dataclasses.replace(base, dualfast=None)
        dual = self.config.dualfast_config(family=base.family)

        variants = []
        for value in values:
            value = str(value)
            if axis == AXIS_C_SCHEDULE:
                variant = parse_mix_schedule(value, dual)
            elif axis == AXIS_TAU:
                variant = parse_tau(value, self.schedule, dual)
            elif axis == AXIS_COEFFICIENT_MODE:
                if value not in ('schedule', MIX_DERIVED):
                    raise ValidationError(f"coefficient-mode must be 'schedule' or 'derived', got '{value}'")
                mix = MIX_DERIVED if value == MIX_DERIVED else (
                    MIX_LINEAR if dual.mix_schedule == MIX_DERIVED else dual.mix_schedule)
                variant = dataclasses.replace(dual, mix_schedule=mix)
            else:
                if value not in ('literal', 'corrected'):
                    raise ValidationError(f"difference must be 'literal' or 'corrected', got '{value}'")
                variant = dataclasses.replace(dual, correct_difference=value == 'corrected')
            variants.append((value, attach(base, variant)))
        return variants

    def ablate(self, axis: str, values: Sequence[str], n_steps: Optional[Sequence[int]] = None,
               base: Optional[SolverConfig] = None) -> AblationResult:
        """Compare runs that vary exactly one correction setting."""
        variants = self.ablation_methods(axis, values, base)
        reports = self.compare([m for _, m in variants], n_steps)
        return AblationResult(axis, [(v, r) for (v, _), r in zip(variants, reports)])

    def convergence_reference(self, batch: int) -> Tuple[np.ndarray, np.ndarray]:
        settings = self.config.convergence
        x_T = self.initial_noise(batch=batch)
        reference = SolverConfig(family=settings.get('reference_family', 'unipc'))
        record, _ = self.run_method(reference, int(settings.get('reference_n_steps', 10000)), x_T, exact=True)
        return x_T, record.endpoint

    def convergence_study(self, families: Optional[Sequence[Union[str, SolverConfig]]] = None,
                          n_steps: Optional[Sequence[int]] = None) -> ConvergenceResult:
        """Fitted log-log slope of endpoint error against 1/N per method, exact oracle.

        `families` holds family names (each at its default settings) or solver configurations.
        """
        settings = self.config.convergence
        methods = [m if isinstance(m, SolverConfig) else SolverConfig(family=m)
                   for m in (families or settings['families'])]
        n_steps = sorted(n_steps or settings['n_steps'])
        if len(n_steps) < 3:
            raise ValidationError(f"A convergence study needs at least 3 step counts, got {n_steps}")
        x_T, x_ref = self.convergence_reference(int(settings.get('batch', 64)))

        def run(unit):
            method, n = unit
            record, _ = self.run_method(method, n, x_T, exact=True)
            return endpoint_error(record.endpoint, x_ref)

        units = [(m, n) for m in methods for n in n_steps]
        errors = self._map(run, units)
        result = ConvergenceResult()
        for i, method in enumerate(methods):
            label = method.label()
            points = list(zip(n_steps, errors[i * len(n_steps):(i + 1) * len(n_steps)]))
            result.errors[label] = points
            result.fits[label] = fit_order([n for n, _ in points], [e for _, e in points])
            SamplerLogger.log(logging.INFO, f"Convergence {label}: slope={result.fits[label][0]:.3f}")
        return result

    def disentangle(self) -> ErrorCurve:
        return run_disentangle(self.schedule, self.mixture, self.config.disentangle, self.workers)

    def save_reports(self, reports: List[MetricReport], name: str) -> Path:
        return write_csv(reports_to_frame(reports), self.output_dir / name, self.encoding)

    def save_frame(self, frame: pd.DataFrame, name: str) -> Path:
        return write_csv(frame, self.output_dir / name, self.encoding)

    def save_curve(self, curve: ErrorCurve, name: str = 'disentangle.csv') -> Path:
        return emit_curve(curve, self.output_dir / name, self.encoding)

    def save_plot(self, reports: List[MetricReport], name: str, metric: str = 'mse_to_reference') -> Path:
        return emit_plot(reports, self.output_dir / name, metric, encoding=self.encoding)

    def write_manifest(self, command: str, extra: Optional[dict] = None) -> Path:
        """run_manifest.json: command, config hash, seed and package versions."""
        manifest = {
            'command': command,
            'config_hash': self.config.config_hash(),
            'seed': self.config.seed,
            'batch': self.config.batch,
            'mse_normalization': MSE_NOTE,
            'versions': {
                'dualfast': app.__version__,
                'python': platform.python_version(),
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'pandas': pd.__version__,
                'matplotlib': matplotlib.__version__,
                'pyyaml': yaml.__version__,
            },
        }
        manifest.update(extra or {})
        path = self.output_dir / 'run_manifest.json'
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding=self.encoding)
        except OSError as e:
            raise ResultsError(f"Failed to write {path}: {e}")
        return path

    def _map(self, fn: Callable, units: list) -> list:
        """Apply fn to every unit; results keep the order of units for any worker count."""
        if self.workers > 1 and len(units) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, units))
        return [fn(unit) for unit in units]

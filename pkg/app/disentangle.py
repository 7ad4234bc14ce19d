"""
Separating approximation error from discretization error over time periods.

Each period [s, t] starts from one batch x_s = alpha_s x_0 + sigma_s eps and runs three
transitions to t: a very fine one with the exact oracle, a fine one with the approximate
oracle and a coarse one with the approximate oracle. The first two differ only through
the oracle (approximation error), the last two only through the step size
(discretization error).
"""

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from app.exceptions import ConfigurationError, NumericError
from app.logger import SamplerLogger
from app.metrics import paired_mse
from app.oracle import ExactNoiseOracle, GaussianMixture, PerturbedNoiseOracle, forward_perturb
from app.records import write_csv
from app.schedule import UNIFORM_LOGSNR, NoiseSchedule
from app.solver import UNIPC, SolverConfig, sample

CURVE_COLUMNS = ['period_index', 's', 't', 'approx_mse', 'disc_mse']


@dataclass(frozen=True)
class DisentangleConfig:
    """Period layout, step counts and oracle settings of the protocol."""

    periods: int = 9
    fine_nfe: int = 111
    coarse_nfe: int = 1
    batch: int = 256
    reference_nfe: Optional[int] = None
    bias_scale: float = 0.15
    drift_scale: float = 0.05
    direction_seed: int = 0
    exact_approximation: bool = False
    seed: int = 0
    scheme: str = UNIFORM_LOGSNR
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(family=UNIPC, order=3))

    def __post_init__(self):
        if self.periods < 1:
            raise ConfigurationError(f"periods must be at least 1, got {self.periods}")
        if self.coarse_nfe < 1 or self.fine_nfe < self.coarse_nfe:
            raise ConfigurationError(
                f"Need fine_nfe >= coarse_nfe >= 1, got {self.fine_nfe}, {self.coarse_nfe}"
            )
        if self.batch < 1:
            raise ConfigurationError(f"batch must be at least 1, got {self.batch}")
        if self.reference_nfe is None:
            object.__setattr__(self, 'reference_nfe', 10 * self.fine_nfe)
        if self.reference_nfe < 1:
            raise ConfigurationError(f"reference_nfe must be at least 1, got {self.reference_nfe}")
        if self.solver.dualfast is not None:
            raise ConfigurationError("Disentangling transitions run without the correction")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data['solver'] = self.solver.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'DisentangleConfig':
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown disentangle settings: {sorted(unknown)}")
        if isinstance(data.get('solver'), dict):
            data['solver'] = SolverConfig.from_dict(data['solver'])
        return cls(**data)


@dataclass(frozen=True)
class PeriodRecord:
    """Errors of one period; the transitions run from s down to t."""

    period_index: int
    s: float
    t: float
    approx_mse: float
    disc_mse: float

    def __post_init__(self):
        for name in ('approx_mse', 'disc_mse'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise NumericError(f"{name} of period {self.period_index} is {value}")


@dataclass
class ErrorCurve:
    """Per-period records ordered by ascending t."""

    records: List[PeriodRecord] = field(default_factory=list)

    @property
    def approx_mse(self) -> List[float]:
        return [r.approx_mse for r in self.records]

    @property
    def disc_mse(self) -> List[float]:
        return [r.disc_mse for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([dataclasses.asdict(r) for r in self.records], columns=CURVE_COLUMNS)


def period_bounds(schedule: NoiseSchedule, periods: int) -> List[tuple]:
    """Equal-width (s, t) intervals of [t_min, t_max], ascending in t."""
    edges = np.linspace(schedule.t_min, schedule.t_max, periods + 1)
    edges[0], edges[-1] = schedule.t_min, schedule.t_max
    return [(float(edges[k + 1]), float(edges[k])) for k in range(periods)]


def run_disentangle(schedule: NoiseSchedule, mixture: GaussianMixture, config: DisentangleConfig,
                    workers: int = 1) -> ErrorCurve:
    """Run the three transitions over every period and collect both error curves."""
    exact = ExactNoiseOracle(mixture, schedule)
    if config.exact_approximation:
        approximate = exact
    else:
        approximate = PerturbedNoiseOracle(
            mixture, schedule, config.bias_scale, config.drift_scale, config.direction_seed
        )
    bounds = period_bounds(schedule, config.periods)

    def run_period(index: int) -> PeriodRecord:
        s, t = bounds[index]
        x0 = mixture.sample(config.batch, [config.seed, index, 0])
        x_s = forward_perturb(schedule, x0, s, [config.seed, index, 1])

        def transition(oracle, n_steps):
            grid = schedule.make_grid(n_steps, config.scheme, t_start=s, t_end=t)
            return sample(schedule, oracle, mixture, config.solver, grid, x_T=x_s).endpoint

        x_exact = transition(exact, config.reference_nfe)
        x_fine = transition(approximate, config.fine_nfe)
        x_coarse = transition(approximate, config.coarse_nfe)
        try:
            return PeriodRecord(
                period_index=index, s=s, t=t,
                approx_mse=paired_mse(x_exact, x_fine),
                disc_mse=paired_mse(x_fine, x_coarse),
            )
        except NumericError as e:
            raise NumericError(f"Period {index} [{s:.6g}, {t:.6g}]: {e}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_period, range(config.periods)))
    else:
        records = [run_period(k) for k in range(config.periods)]

    curve = ErrorCurve(records)
    SamplerLogger.log(
        logging.INFO,
        f"Disentangled {config.periods} periods: max approx_mse={max(curve.approx_mse):.3e}, "
        f"max disc_mse={max(curve.disc_mse):.3e}",
    )
    return curve


def emit_curve(curve: ErrorCurve, path, encoding: str = 'utf-8'):
    """Write the curve as `period_index,s,t,approx_mse,disc_mse` rows."""
    return write_csv(curve.to_frame(), path, encoding)

"""
Continuous variance-preserving noise schedule, log-SNR change of variables and time grids.

For t in [0, 1] the linear VP schedule has beta(t) = beta_min + t (beta_max - beta_min) and

    log alpha_t = -1/4 t^2 (beta_max - beta_min) - 1/2 t beta_min
    sigma_t     = sqrt(1 - alpha_t^2)
    lambda_t    = log alpha_t - log sigma_t

Sampling runs from T = t_max down to t_min.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.optimize import bisect

from app.exceptions import DomainError, OrderError, ValidationError

UNIFORM_LOGSNR = 'uniform-logSNR'
UNIFORM_TIME = 'uniform-time'
GRID_SCHEMES = (UNIFORM_LOGSNR, UNIFORM_TIME)

# bisection tolerance in t; tighter than the 1e-12 contract so grid steps stay equal in lambda
_INVERSE_XTOL = 1e-15


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear VP schedule on the continuous time interval [t_min, t_max]."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    t_max: float = 1.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max >= self.beta_min):
            raise ValidationError(
                f"Need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if not (0.0 < self.t_min < self.t_max <= 1.0):
            raise ValidationError(
                f"Need 0 < t_min < t_max <= 1, got {self.t_min}, {self.t_max}"
            )

    def _check_time(self, t: float, lower: float = 0.0) -> float:
        t = float(t)
        if not (lower <= t <= 1.0) or math.isnan(t):
            raise DomainError(f"Time {t} outside [{lower}, 1]")
        return t

    def beta(self, t: float) -> float:
        """Instantaneous rate beta(t)."""
        t = self._check_time(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def log_alpha(self, t: float) -> float:
        t = self._check_time(t)
        return -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min

    def alpha_sigma(self, t: float) -> Tuple[float, float]:
        """Return (alpha_t, sigma_t) of the transition kernel q(x_t | x_0)."""
        log_alpha = self.log_alpha(t)
        # sigma^2 = 1 - alpha^2 computed without cancellation near t = 0
        return math.exp(log_alpha), math.sqrt(-math.expm1(2.0 * log_alpha))

    def lambda_of(self, t: float) -> float:
        """Half log-SNR lambda_t = log(alpha_t / sigma_t)."""
        t = self._check_time(t)
        if t == 0.0:
            raise DomainError("lambda is unbounded at t = 0")
        log_alpha = self.log_alpha(t)
        return log_alpha - 0.5 * math.log(-math.expm1(2.0 * log_alpha))

    def lambda_range(self) -> Tuple[float, float]:
        """(lambda(t_max), lambda(t_min)); lambda decreases in t."""
        return self.lambda_of(self.t_max), self.lambda_of(self.t_min)

    def t_of_lambda(self, value: float) -> float:
        """Invert lambda by bisection on [t_min, t_max]."""
        value = float(value)
        low, high = self.lambda_range()
        slack = 1e-12 * max(1.0, abs(value))
        if not (low - slack <= value <= high + slack):
            raise DomainError(f"log-SNR {value} outside achievable range [{low}, {high}]")
        if value >= high:
            return self.t_min
        if value <= low:
            return self.t_max
        return bisect(
            lambda t: self.lambda_of(t) - value,
            self.t_min,
            self.t_max,
            xtol=_INVERSE_XTOL,
            maxiter=200,
        )

    def step_size(self, s: float, t: float) -> float:
        """h = lambda_t - lambda_s for a step from time s down to time t."""
        if s < t:
            raise OrderError(f"Step must move to smaller time, got s={s} < t={t}")
        if s == t:
            return 0.0
        return self.lambda_of(t) - self.lambda_of(s)

    def drift_diffusion(self, t: float) -> Tuple[float, float]:
        """Return (f(t), g(t)^2) of the probability-flow ODE."""
        drift = -0.5 * self.beta(t)
        # g^2 = d sigma^2/dt - 2 f sigma^2 = -2 f (alpha^2 + sigma^2) = beta(t)
        return drift, -2.0 * drift

    def make_grid(self, n_steps: int, scheme: str = UNIFORM_LOGSNR,
                  t_start: float = None, t_end: float = None) -> 'TimeGrid':
        """Build a strictly decreasing grid of n_steps + 1 times from t_start to t_end."""
        t_start = self.t_max if t_start is None else float(t_start)
        t_end = self.t_min if t_end is None else float(t_end)
        return _cached_grid(self, int(n_steps), scheme, t_start, t_end)

    def to_dict(self) -> dict:
        return {
            'beta_min': self.beta_min,
            'beta_max': self.beta_max,
            't_min': self.t_min,
            't_max': self.t_max,
        }


@dataclass(frozen=True)
class TimeGrid:
    """Ordered sampling times t_0 = start > t_1 > ... > t_N = end."""

    steps: Tuple[float, ...]
    scheme: str = UNIFORM_LOGSNR

    def __post_init__(self):
        if len(self.steps) < 2:
            raise ValidationError("A time grid needs at least one step (two times)")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValidationError("Time grid must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, index: int) -> float:
        return self.steps[index]


@lru_cache(maxsize=64)
def _cached_grid(schedule: NoiseSchedule, n_steps: int, scheme: str,
                 t_start: float, t_end: float) -> TimeGrid:
    if n_steps < 1:
        raise ValidationError(f"Step count must be at least 1, got {n_steps}")
    if scheme not in GRID_SCHEMES:
        raise ValidationError(f"Unknown grid scheme '{scheme}', expected one of {GRID_SCHEMES}")
    if not (schedule.t_min <= t_end < t_start <= schedule.t_max):
        raise ValidationError(
            f"Grid endpoints must satisfy t_min <= end < start <= t_max, got {t_start}, {t_end}"
        )

    if scheme == UNIFORM_TIME:
        times = np.linspace(t_start, t_end, n_steps + 1)
    else:
        lambdas = np.linspace(schedule.lambda_of(t_start), schedule.lambda_of(t_end), n_steps + 1)
        times = np.array([schedule.t_of_lambda(v) for v in lambdas])

    steps = [float(t) for t in times]
    steps[0], steps[-1] = t_start, t_end
    return TimeGrid(steps=tuple(steps), scheme=scheme)

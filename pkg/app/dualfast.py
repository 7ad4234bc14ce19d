"""
Approximation-error correction for exponential-integrator samplers.

The noise prediction at the current step is mixed with a prediction taken at a larger,
more reliable step tau:

    eps_new(x_t, t) = (1 + c) eps(x_t, t) - c eps(x_tau, tau)

The mixing coefficient c comes from a tunable schedule (linear 0.5 -> 0.0 or constant;
the experiment config picks constant 0.1 for the 2M solvers) or from the first-order
identity c = 1 / (e^h - 1), under which the corrected DDIM step equals
x_{t-1} = alpha_{t-1} x_theta(x_t, t) + sigma_{t-1} eps(x_tau, tau).
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from app.exceptions import ConfigurationError, DomainError, ValidationError
from app.oracle import data_to_noise
from app.schedule import NoiseSchedule

if TYPE_CHECKING:
    from app.solver import SolverConfig

MIX_LINEAR = 'linear'
MIX_CONSTANT = 'constant'
MIX_DERIVED = 'derived'
MIX_SCHEDULES = (MIX_LINEAR, MIX_CONSTANT, MIX_DERIVED)

ANCHOR_INITIAL_NOISE = 'initial-noise'
ANCHOR_ORACLE = 'oracle-at-anchor'
ANCHOR_CURRENT = 'current'
ANCHOR_SOURCES = (ANCHOR_INITIAL_NOISE, ANCHOR_ORACLE, ANCHOR_CURRENT)


@dataclass(frozen=True)
class DualFastConfig:
    """Mixing-coefficient schedule and anchor settings of the correction."""

    mix_schedule: str = MIX_LINEAR
    c_start: float = 0.5
    c_end: float = 0.0
    c_constant: float = 0.25
    tau: Optional[float] = None
    anchor_source: str = ANCHOR_INITIAL_NOISE
    correct_difference: bool = False

    def __post_init__(self):
        if self.mix_schedule not in MIX_SCHEDULES:
            raise ConfigurationError(
                f"Unknown mixing schedule '{self.mix_schedule}', expected one of {MIX_SCHEDULES}"
            )
        if self.anchor_source not in ANCHOR_SOURCES:
            raise ConfigurationError(
                f"Unknown anchor source '{self.anchor_source}', expected one of {ANCHOR_SOURCES}"
            )
        for name in ('c_start', 'c_end', 'c_constant'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        if self.anchor_source == ANCHOR_INITIAL_NOISE and self.tau is not None and self.tau < 1.0:
            raise ConfigurationError("The initial-noise anchor is only defined for tau = T")

    def anchor_time(self, schedule: NoiseSchedule) -> float:
        return schedule.t_max if self.tau is None else float(self.tau)

    def label(self) -> str:
        if self.mix_schedule == MIX_LINEAR:
            mix = f"linear({self.c_start:g}->{self.c_end:g})"
        elif self.mix_schedule == MIX_CONSTANT:
            mix = f"constant({self.c_constant:g})"
        else:
            mix = 'derived'
        anchor = 'current' if self.anchor_source == ANCHOR_CURRENT else (
            'T' if self.tau is None else f"{self.tau:g}")
        return f"{mix},tau={anchor}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'DualFastConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown dualfast settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class AnchorPrediction:
    """The large-t prediction eps(x_tau, tau) the correction mixes in."""

    eps_anchor: np.ndarray
    tau: float


def parse_mix_schedule(text: str, base: DualFastConfig = None) -> DualFastConfig:
    """Parse 'linear', 'constant:<v>' or 'derived' into a config."""
    base = base or DualFastConfig()
    text = text.strip().lower()
    if text == MIX_LINEAR:
        return dataclasses.replace(base, mix_schedule=MIX_LINEAR)
    if text == MIX_DERIVED:
        return dataclasses.replace(base, mix_schedule=MIX_DERIVED)
    if text.startswith(MIX_CONSTANT):
        _, _, value = text.partition(':')
        try:
            constant = float(value) if value else base.c_constant
        except ValueError:
            raise ValidationError(f"Invalid constant mixing coefficient '{value}'")
        return dataclasses.replace(base, mix_schedule=MIX_CONSTANT, c_constant=constant)
    raise ValidationError(f"Unknown mixing schedule '{text}', expected linear|constant:v|derived")


def parse_tau(text: str, schedule: NoiseSchedule, base: DualFastConfig = None) -> DualFastConfig:
    """Parse 'T', 'current', 'midpoint' or a numeric time into an anchor setting."""
    base = base or DualFastConfig()
    text = str(text).strip()
    if text.upper() == 'T':
        return dataclasses.replace(base, tau=None, anchor_source=ANCHOR_INITIAL_NOISE)
    if text.lower() == ANCHOR_CURRENT:
        return dataclasses.replace(base, tau=None, anchor_source=ANCHOR_CURRENT)
    if text.lower() == 'midpoint':
        tau = 0.5 * (schedule.t_max + schedule.t_min)
    else:
        try:
            tau = float(text)
        except ValueError:
            raise ValidationError(f"Invalid tau '{text}', expected T|current|midpoint|<time>")
    if not (schedule.t_min <= tau <= schedule.t_max):
        raise ValidationError(f"tau {tau} outside [{schedule.t_min}, {schedule.t_max}]")
    return dataclasses.replace(base, tau=tau, anchor_source=ANCHOR_ORACLE)


def mixing_coefficient(config: DualFastConfig, t: float, h: float = None, t_max: float = 1.0) -> float:
    """Mixing coefficient c at time t (step size h is needed by the derived mode)."""
    if config.mix_schedule == MIX_CONSTANT:
        return config.c_constant
    if config.mix_schedule == MIX_DERIVED:
        if h is None or not h > 0:
            raise DomainError(f"Derived mixing coefficient needs h > 0, got {h}")
        return 1.0 / math.expm1(h)
    if not (0.0 <= t <= t_max):
        raise DomainError(f"Time {t} outside [0, {t_max}]")
    frac = t / t_max
    return config.c_start * (1.0 - frac) + config.c_end * frac


def corrected_noise(eps_t, eps_anchor, c: float) -> np.ndarray:
    """(1 + c) eps_t - c eps_anchor, written so that c = 0 or eps_anchor = eps_t is exact."""
    eps_t = np.asarray(eps_t, dtype=float)
    eps_anchor = np.asarray(eps_anchor, dtype=float)
    if eps_t.shape[-1:] != eps_anchor.shape[-1:] or eps_anchor.ndim > eps_t.ndim:
        raise ValidationError(
            f"Dimension mismatch between {eps_t.shape} and {eps_anchor.shape}"
        )
    return eps_t + c * (eps_t - eps_anchor)


def dualfast_ddim_D(eps_t, eps_anchor, h: float) -> np.ndarray:
    """First-order D with c = 1 / (e^h - 1)."""
    if not h > 0:
        raise DomainError(f"Step size must be positive, got {h}")
    return corrected_noise(eps_t, eps_anchor, 1.0 / math.expm1(h))


def dualfast_dpm_solver_D(eps_t, eps_prev, eps_anchor, c: float, a_1: float,
                          correct_difference: bool = False) -> np.ndarray:
    """Corrected first-order part plus the (uncorrected) 2M difference term."""
    corrected = corrected_noise(eps_t, eps_anchor, c)
    if correct_difference:
        prev = corrected_noise(eps_prev, eps_anchor, c)
        return corrected + a_1 * (corrected - prev)
    return corrected + a_1 * (np.asarray(eps_t) - np.asarray(eps_prev))


def corrected_data(schedule: NoiseSchedule, x_t, t: float, data_pred, eps_anchor, c: float) -> np.ndarray:
    """Correct a data prediction through its noise form.

    x_theta -> eps (via x = alpha x_theta + sigma eps) -> (1 + c) eps - c eps_anchor -> x_theta.
    Written as x_theta - (sigma / alpha) c (eps - eps_anchor), the same map without
    the round-off of two conversions.
    """
    alpha, sigma = schedule.alpha_sigma(t)
    eps = data_to_noise(schedule, x_t, t, data_pred)
    return np.asarray(data_pred) - (sigma / alpha) * (corrected_noise(eps, eps_anchor, c) - eps)


def dualfast_dpmpp_D(x_pred_t, x_pred_prev, eps_anchor, c: float, a_2: float,
                     schedule: NoiseSchedule, x_t, t: float,
                     correct_difference: bool = False, x_prev=None, t_prev: float = None) -> np.ndarray:
    """Data-prediction 2M D with the first-order part corrected in noise space."""
    first = corrected_data(schedule, x_t, t, x_pred_t, eps_anchor, c)
    if correct_difference:
        if x_prev is None or t_prev is None:
            raise ValidationError("Correcting the difference term needs the previous state")
        prev = corrected_data(schedule, x_prev, t_prev, x_pred_prev, eps_anchor, c)
        return first + a_2 * (first - prev)
    return first + a_2 * (np.asarray(x_pred_t) - np.asarray(x_pred_prev))


def dualfast_unipc_corrector_D(differences: Sequence[np.ndarray], eps_new, eps_t, eps_anchor,
                               c: float, coefficients: Sequence[float]) -> np.ndarray:
    """UniPC corrector D whose new-point bracket uses the corrected prediction.

    `differences` are the scaled history differences (m_k - m_0) / r_k and
    `coefficients` the corrector weights, the last one multiplying the new-point bracket.
    """
    coefficients = list(coefficients)
    if len(coefficients) != len(differences) + 1:
        raise ValidationError("Need one corrector coefficient per difference plus the new point")
    D = np.asarray(eps_t, dtype=float)
    for rho, diff in zip(coefficients[:-1], differences):
        D = D + rho * diff
    return D + coefficients[-1] * (corrected_noise(eps_new, eps_anchor, c) - eps_t)


def attach(config: 'SolverConfig', dual: DualFastConfig) -> 'SolverConfig':
    """Return a copy of the solver configuration that applies the correction."""
    if config.family == 'unipc' and config.prediction_mode != 'noise':
        raise ConfigurationError("The UniPC correction is defined for noise prediction only")
    if config.family == 'unipc' and not config.use_corrector:
        raise ConfigurationError("The UniPC correction acts on the corrector; enable use_corrector")
    if config.family not in ('ddim', 'dpm-solver-2m', 'dpm-solver++-2m', 'unipc'):
        raise ConfigurationError(f"Cannot attach the correction to family '{config.family}'")
    return dataclasses.replace(config, dualfast=dual)

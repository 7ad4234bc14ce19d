"""
Exponential-integrator samplers for the probability-flow ODE.

Every solver here is one affine update per step,

    noise prediction:  x_t = (alpha_t / alpha_s) x_s - sigma_t (e^h - 1) D
    data prediction:   x_t = (sigma_t / sigma_s) x_s - alpha_t (e^-h - 1) D

with h = lambda_t - lambda_s; the families differ only in how D is built from the
current prediction and the multistep history. Step functions are pure: they take a
StepState and return the next one.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.dualfast import (
    ANCHOR_CURRENT,
    ANCHOR_INITIAL_NOISE,
    ANCHOR_ORACLE,
    MIX_DERIVED,
    AnchorPrediction,
    DualFastConfig,
    corrected_data,
    corrected_noise,
    dualfast_ddim_D,
    dualfast_dpm_solver_D,
    dualfast_dpmpp_D,
    dualfast_unipc_corrector_D,
    mixing_coefficient,
)
from app.exceptions import ConfigurationError, GridError, NumericError, ValidationError
from app.logger import SamplerLogger
from app.oracle import GaussianMixture, NoiseOracle, PredictionPair, data_to_noise, make_rng
from app.schedule import NoiseSchedule, TimeGrid

DDIM = 'ddim'
DPM_SOLVER_2M = 'dpm-solver-2m'
DPM_SOLVERPP_2M = 'dpm-solver++-2m'
UNIPC = 'unipc'
FAMILIES = (DDIM, DPM_SOLVER_2M, DPM_SOLVERPP_2M, UNIPC)

NOISE = 'noise'
DATA = 'data'

_DEFAULT_ORDER = {DDIM: 1, DPM_SOLVER_2M: 2, DPM_SOLVERPP_2M: 2, UNIPC: 3}
_DEFAULT_MODE = {DDIM: NOISE, DPM_SOLVER_2M: NOISE, DPM_SOLVERPP_2M: DATA, UNIPC: NOISE}


@dataclass(frozen=True)
class SolverConfig:
    """Solver family, order, prediction mode and optional correction."""

    family: str = DDIM
    order: Optional[int] = None
    prediction_mode: Optional[str] = None
    use_corrector: bool = True
    thresholding: bool = False
    threshold_bound: float = 10.0
    dualfast: Optional[DualFastConfig] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"Unknown solver family '{self.family}', expected one of {FAMILIES}")
        if self.order is None:
            object.__setattr__(self, 'order', _DEFAULT_ORDER[self.family])
        if self.prediction_mode is None:
            object.__setattr__(self, 'prediction_mode', _DEFAULT_MODE[self.family])
        if self.prediction_mode not in (NOISE, DATA):
            raise ConfigurationError(f"Unknown prediction mode '{self.prediction_mode}'")

        if self.family == UNIPC:
            if self.order not in (1, 2, 3):
                raise ConfigurationError(f"UniPC supports orders 1-3, got {self.order}")
        elif self.order != _DEFAULT_ORDER[self.family]:
            raise ConfigurationError(
                f"{self.family} has fixed order {_DEFAULT_ORDER[self.family]}, got {self.order}"
            )
        if self.family in (DDIM, DPM_SOLVER_2M) and self.prediction_mode != NOISE:
            raise ConfigurationError(f"{self.family} requires noise prediction")
        if self.family == DPM_SOLVERPP_2M and self.prediction_mode != DATA:
            raise ConfigurationError(f"{self.family} requires data prediction")
        if self.family == UNIPC and self.dualfast is not None and self.prediction_mode != NOISE:
            raise ConfigurationError("The UniPC correction is defined for noise prediction only")
        if self.family == UNIPC and self.dualfast is not None and not self.use_corrector:
            raise ConfigurationError("The UniPC correction acts on the corrector; enable use_corrector")
        if not self.threshold_bound > 0:
            raise ConfigurationError("threshold_bound must be positive")

    @property
    def history_length(self) -> int:
        return self.order

    def label(self) -> str:
        name = self.family
        if self.family == UNIPC:
            name = f"unipc-{self.order}{'+c' if self.use_corrector else ''}"
            if self.prediction_mode == DATA:
                name += '-data'
        if self.dualfast is not None:
            name = f"dualfast-{name}"
        return name

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data['dualfast'] = None if self.dualfast is None else self.dualfast.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'SolverConfig':
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown solver settings: {sorted(unknown)}")
        dual = data.pop('dualfast', None)
        if isinstance(dual, dict):
            dual = DualFastConfig.from_dict(dual)
        return cls(dualfast=dual, **data)


@dataclass(frozen=True)
class HistoryEntry:
    """A past evaluation and the point it was taken at."""

    x: np.ndarray
    pair: PredictionPair

    @property
    def t(self) -> float:
        return self.pair.t


@dataclass(frozen=True)
class StepState:
    """Current point, grid position and multistep history of one trajectory batch."""

    x: np.ndarray
    index: int
    grid: TimeGrid
    history: Tuple[HistoryEntry, ...] = ()
    evaluated: bool = False
    anchor: Optional[AnchorPrediction] = None
    nfe: int = 0

    @property
    def t(self) -> float:
        return self.grid[self.index]

    @property
    def t_next(self) -> float:
        if self.index >= self.grid.n_steps:
            raise GridError("Trajectory already reached the end of its grid")
        return self.grid[self.index + 1]

    @property
    def is_final(self) -> bool:
        return self.index + 1 == self.grid.n_steps


@dataclass
class TrajectoryRecord:
    """States visited by one sampling run and the evaluations it used."""

    grid: TimeGrid
    states: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    nfe: int = 0
    config: Optional[SolverConfig] = None

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1][1]


def unified_update_noise(schedule: NoiseSchedule, x_s, D, s: float, t: float) -> np.ndarray:
    """x_t = (alpha_t / alpha_s) x_s - sigma_t (e^h - 1) D."""
    x_s, D = _finite(x_s, 'x_s'), _finite(D, 'D')
    h = schedule.step_size(s, t)
    _, sigma_t = schedule.alpha_sigma(t)
    ratio = math.exp(schedule.log_alpha(t) - schedule.log_alpha(s))
    return ratio * x_s - (sigma_t * math.expm1(h)) * D


def unified_update_data(schedule: NoiseSchedule, x_s, D, s: float, t: float) -> np.ndarray:
    """x_t = (sigma_t / sigma_s) x_s - alpha_t (e^-h - 1) D."""
    x_s, D = _finite(x_s, 'x_s'), _finite(D, 'D')
    h = schedule.step_size(s, t)
    _, sigma_s = schedule.alpha_sigma(s)
    alpha_t, sigma_t = schedule.alpha_sigma(t)
    return (sigma_t / sigma_s) * x_s - (alpha_t * math.expm1(-h)) * D


def init_state(schedule: NoiseSchedule, config: SolverConfig, grid: TimeGrid, x_T) -> StepState:
    """Starting state; the initial-noise anchor is the latent x_T itself."""
    x_T = np.array(x_T, dtype=float)
    anchor = None
    dual = config.dualfast
    if dual is not None and dual.anchor_source == ANCHOR_INITIAL_NOISE:
        anchor = AnchorPrediction(eps_anchor=x_T.copy(), tau=grid[0])
    return StepState(x=x_T, index=0, grid=grid, anchor=anchor)


def acquire_anchor(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
                   config: SolverConfig) -> StepState:
    """Evaluate the anchor prediction once the trajectory reaches tau (one extra NFE)."""
    dual = config.dualfast
    if dual is None or dual.anchor_source != ANCHOR_ORACLE or state.anchor is not None:
        return state
    tau = dual.anchor_time(schedule)
    if state.t > tau:
        return state
    pair = oracle.predict(state.x, state.t)
    anchor = AnchorPrediction(eps_anchor=pair.noise_pred, tau=state.t)
    return dataclasses.replace(state, anchor=anchor, nfe=state.nfe + 1)


def ddim_step(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
              config: SolverConfig = None) -> StepState:
    """First-order step, D = eps_theta(x_s, s)."""
    config = config or SolverConfig(family=DDIM)
    state, pair = _evaluate(schedule, oracle, state, config)
    s, t = state.t, state.t_next
    h = schedule.step_size(s, t)
    D = _first_order_noise(schedule, state, config, pair, h)
    return _advance(state, unified_update_noise(schedule, state.x, D, s, t))


def dpm_solver_2m_step(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
                       config: SolverConfig = None) -> StepState:
    """Second-order multistep step in noise prediction."""
    config = config or SolverConfig(family=DPM_SOLVER_2M)
    state, pair = _evaluate(schedule, oracle, state, config)
    s, t = state.t, state.t_next
    h = schedule.step_size(s, t)
    if len(state.history) < 2:
        D = _first_order_noise(schedule, state, config, pair, h)
        return _advance(state, unified_update_noise(schedule, state.x, D, s, t))

    prev = state.history[-2]
    a_1 = _multistep_coefficient(schedule, prev.t, s, h)
    eps, eps_prev = pair.noise_pred, prev.pair.noise_pred
    eps_anchor = _anchor_noise(schedule, state, config, pair, state.x)
    if eps_anchor is None:
        D = eps + a_1 * (eps - eps_prev)
    else:
        c = _coefficient(schedule, config, s, h)
        D = dualfast_dpm_solver_D(eps, eps_prev, eps_anchor, c, a_1,
                                  correct_difference=config.dualfast.correct_difference)
    return _advance(state, unified_update_noise(schedule, state.x, D, s, t))


def dpm_solverpp_2m_step(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
                         config: SolverConfig = None) -> StepState:
    """Second-order multistep step in data prediction."""
    config = config or SolverConfig(family=DPM_SOLVERPP_2M)
    state, pair = _evaluate(schedule, oracle, state, config)
    s, t = state.t, state.t_next
    h = schedule.step_size(s, t)
    x0 = pair.data_pred
    eps_anchor = _anchor_noise(schedule, state, config, pair, state.x)

    if len(state.history) < 2:
        if eps_anchor is None:
            D = x0
        else:
            D = corrected_data(schedule, state.x, s, x0, eps_anchor, _coefficient(schedule, config, s, h))
        return _advance(state, unified_update_data(schedule, state.x, D, s, t))

    prev = state.history[-2]
    a_2 = _multistep_coefficient(schedule, prev.t, s, h)
    x0_prev = prev.pair.data_pred
    if eps_anchor is None:
        D = x0 + a_2 * (x0 - x0_prev)
    else:
        D = dualfast_dpmpp_D(
            x0, x0_prev, eps_anchor, _coefficient(schedule, config, s, h), a_2,
            schedule, state.x, s,
            correct_difference=config.dualfast.correct_difference,
            x_prev=prev.x, t_prev=prev.t,
        )
    return _advance(state, unified_update_data(schedule, state.x, D, s, t))


def unipc_coefficients(rks: Sequence[float], hh: float, order: int,
                       use_corrector: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Predictor and corrector weights of the B(h) = e^h - 1 UniPC variant.

    Row i of R holds r_k^(i-1) over the history ratios r_k plus the new point (r = 1);
    b_i = i! h phi_{i+1}(h) / B(h). The order-2 predictor and order-1 corrector use
    the fixed weight 1/2.
    """
    if any(r == 0.0 for r in rks):
        raise GridError("Coincident log-SNR nodes in the UniPC history")
    nodes = np.array(list(rks) + [1.0])
    B_h = math.expm1(hh)
    h_phi_k = math.expm1(hh) / hh - 1.0
    factorial = 1
    R, b = [], []
    for i in range(1, order + 1):
        R.append(nodes ** (i - 1))
        b.append(h_phi_k * factorial / B_h)
        factorial *= i + 1
        h_phi_k = h_phi_k / hh - 1.0 / factorial
    R, b = np.stack(R), np.array(b)

    try:
        if order == 1:
            rhos_p = np.zeros(0)
        elif order == 2:
            rhos_p = np.array([0.5])
        else:
            rhos_p = np.linalg.solve(R[:-1, :-1], b[:-1])
        if not use_corrector:
            rhos_c = np.zeros(0)
        elif order == 1:
            rhos_c = np.array([0.5])
        else:
            rhos_c = np.linalg.solve(R, b)
    except np.linalg.LinAlgError:
        raise GridError("Singular UniPC coefficient system (coincident log-SNR nodes)")
    return rhos_p, rhos_c


def unipc_step(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
               p: int = 3, use_corrector: bool = True, config: SolverConfig = None) -> StepState:
    """Predictor step of order min(p, history), refined by the corrector except on the final step."""
    config = config or SolverConfig(family=UNIPC, order=p, use_corrector=use_corrector)
    state, pair = _evaluate(schedule, oracle, state, config)
    data_mode = config.prediction_mode == DATA
    model = (lambda e: e.data_pred) if data_mode else (lambda e: e.noise_pred)
    update = unified_update_data if data_mode else unified_update_noise

    s, t = state.t, state.t_next
    lambda_s = schedule.lambda_of(s)
    h = schedule.lambda_of(t) - lambda_s
    if not h > 0:
        raise GridError(f"Non-positive log-SNR step between {s} and {t}")
    order = min(p, len(state.history))

    m0 = model(pair)
    rks, differences = [], []
    for i in range(1, order):
        entry = state.history[-(i + 1)]
        rk = (schedule.lambda_of(entry.t) - lambda_s) / h
        if rk == 0.0:
            raise GridError("Coincident log-SNR nodes in the UniPC history")
        rks.append(rk)
        differences.append((model(entry.pair) - m0) / rk)

    correct = use_corrector and not state.is_final
    rhos_p, rhos_c = unipc_coefficients(rks, -h if data_mode else h, order, correct)

    D_pred = m0
    for rho, diff in zip(rhos_p, differences):
        D_pred = D_pred + rho * diff
    x_pred = update(schedule, state.x, D_pred, s, t)
    if not correct:
        return _advance(state, x_pred)

    new_pair = _predict(schedule, oracle, x_pred, t, config)
    m_new = model(new_pair)
    eps_anchor = _anchor_noise(schedule, state, config, new_pair, x_pred)
    if eps_anchor is None:
        eps_anchor, c = m_new, 0.0
    else:
        c = _coefficient(schedule, config, t, h)
    D_corr = dualfast_unipc_corrector_D(differences, m_new, m0, eps_anchor, c, rhos_c)
    x_next = update(schedule, state.x, D_corr, s, t)

    history = (state.history + (HistoryEntry(x=x_pred, pair=new_pair),))[-config.history_length:]
    return dataclasses.replace(
        state, x=x_next, index=state.index + 1, history=history,
        evaluated=True, nfe=state.nfe + 1,
    )


class SolverFactory:
    """Factory for step functions by solver family."""

    _steps: Dict[str, Callable] = {
        DDIM: ddim_step,
        DPM_SOLVER_2M: dpm_solver_2m_step,
        DPM_SOLVERPP_2M: dpm_solverpp_2m_step,
        UNIPC: unipc_step,
    }

    @classmethod
    def create(cls, config: SolverConfig) -> Callable[[NoiseSchedule, NoiseOracle, StepState], StepState]:
        """Bind a configuration to its family's step function."""
        if config.family not in cls._steps:
            raise ConfigurationError(f"Unknown solver family: {config.family}")
        if config.family == UNIPC:
            return partial(unipc_step, p=config.order, use_corrector=config.use_corrector, config=config)
        return partial(cls._steps[config.family], config=config)

    @classmethod
    def get_available_families(cls) -> list:
        return list(cls._steps.keys())


def sample(schedule: NoiseSchedule, oracle: NoiseOracle, mixture: GaussianMixture,
           config: SolverConfig, grid: TimeGrid, x_T=None, seed=0, batch: int = 1) -> TrajectoryRecord:
    """Integrate the probability-flow ODE across the grid from x_T (standard normal if not given)."""
    if x_T is None:
        if batch < 1:
            raise ValidationError(f"Batch size must be at least 1, got {batch}")
        x_T = make_rng(seed).standard_normal((batch, mixture.dim))
    x_T = np.asarray(x_T, dtype=float)
    if x_T.shape[-1] != mixture.dim:
        raise ValidationError(f"Initial latent must have dimension {mixture.dim}, got {x_T.shape}")

    step = SolverFactory.create(config)
    state = init_state(schedule, config, grid, x_T)
    record = TrajectoryRecord(grid=grid, states=[(grid[0], state.x.copy())], config=config)
    for i in range(grid.n_steps):
        state = acquire_anchor(schedule, oracle, state, config)
        try:
            state = step(schedule, oracle, state)
        except NumericError as e:
            raise type(e)(f"Step {i} (t={grid[i]:.6g}) failed: {e}") from e
        if not np.all(np.isfinite(state.x)):
            raise NumericError(f"Non-finite state after step {i} (t={grid[i + 1]:.6g})")
        record.states.append((state.t, state.x))
    record.nfe = state.nfe

    SamplerLogger.log(
        logging.DEBUG,
        f"Sampled {config.label()} N={grid.n_steps} batch={x_T.shape[0] if x_T.ndim > 1 else 1} nfe={record.nfe}",
    )
    return record


def _finite(value, what: str) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"Non-finite {what}")
    return value


def _predict(schedule: NoiseSchedule, oracle: NoiseOracle, x, t: float,
             config: SolverConfig) -> PredictionPair:
    pair = oracle.predict(x, t)
    if config.thresholding and config.prediction_mode == DATA:
        bound = config.threshold_bound
        pair = PredictionPair(pair.noise_pred, np.clip(pair.data_pred, -bound, bound), pair.t)
    return pair


def _evaluate(schedule: NoiseSchedule, oracle: NoiseOracle, state: StepState,
              config: SolverConfig) -> Tuple[StepState, PredictionPair]:
    """The prediction at the current node, evaluating the oracle if not done yet."""
    if state.evaluated:
        return state, state.history[-1].pair
    pair = _predict(schedule, oracle, state.x, state.t, config)
    history = (state.history + (HistoryEntry(x=state.x, pair=pair),))[-config.history_length:]
    state = dataclasses.replace(state, history=history, evaluated=True, nfe=state.nfe + 1)
    return state, pair


def _advance(state: StepState, x_next: np.ndarray) -> StepState:
    return dataclasses.replace(state, x=x_next, index=state.index + 1, evaluated=False)


def _multistep_coefficient(schedule: NoiseSchedule, t_prev: float, s: float, h: float) -> float:
    """a = h_cur / (2 h_prev) of the 2M solvers."""
    h_prev = schedule.step_size(t_prev, s)
    if not h_prev > 0:
        raise GridError(f"Coincident log-SNR nodes at {t_prev} and {s}")
    return h / (2.0 * h_prev)


def _anchor_noise(schedule: NoiseSchedule, state: StepState, config: SolverConfig,
                  pair: PredictionPair, x) -> Optional[np.ndarray]:
    """Anchor prediction usable at this step, or None when no correction applies.

    The current anchor in data mode is the noise form of the data prediction at x, the
    same conversion corrected_data applies, so a zero correction returns it unchanged.
    """
    dual = config.dualfast
    if dual is None:
        return None
    if dual.anchor_source == ANCHOR_CURRENT:
        if config.prediction_mode == DATA:
            return data_to_noise(schedule, x, pair.t, pair.data_pred)
        return pair.noise_pred
    if state.anchor is None or state.anchor.tau < pair.t:
        return None
    return state.anchor.eps_anchor


def _coefficient(schedule: NoiseSchedule, config: SolverConfig, t: float, h: float) -> float:
    return mixing_coefficient(config.dualfast, t, h, schedule.t_max)


def _first_order_noise(schedule: NoiseSchedule, state: StepState, config: SolverConfig,
                       pair: PredictionPair, h: float) -> np.ndarray:
    eps = pair.noise_pred
    eps_anchor = _anchor_noise(schedule, state, config, pair, state.x)
    if eps_anchor is None:
        return eps
    if config.dualfast.mix_schedule == MIX_DERIVED:
        return dualfast_ddim_D(eps, eps_anchor, h)
    return corrected_noise(eps, eps_anchor, _coefficient(schedule, config, state.t, h))

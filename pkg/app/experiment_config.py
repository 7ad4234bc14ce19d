"""
Experiment configuration loaded from a YAML file.

Every field has a default, so an empty or missing file describes the reference setup:
the 3-component 2-D mixture, the perturbed oracle and DDIM on a uniform log-SNR grid.
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, List, Optional

import yaml

from app.disentangle import DisentangleConfig
from app.dualfast import DualFastConfig, attach, parse_mix_schedule, parse_tau
from app.exceptions import ConfigurationError, SamplerError
from app.oracle import (
    EXACT,
    PERTURBED,
    ExactNoiseOracle,
    GaussianMixture,
    NoiseOracle,
    PerturbedNoiseOracle,
)
from app.schedule import NoiseSchedule
from app.solver import DDIM, DPM_SOLVER_2M, DPM_SOLVERPP_2M, FAMILIES, UNIPC, SolverConfig

DEFAULTS = {
    'schedule': {'beta_min': 0.1, 'beta_max': 20.0, 't_min': 1e-3, 't_max': 1.0},
    'mixture': 'reference',
    'oracle': {'kind': PERTURBED, 'bias_scale': 0.15, 'drift_scale': 0.05, 'direction_seed': 0},
    'solver': {'family': DDIM},
    'dualfast': {
        'enabled': False,
        'mix_schedule': 'linear',
        'multistep_mix_schedule': 'constant:0.1',
        'c_start': 0.5,
        'c_end': 0.0,
        'c_constant': 0.25,
        'tau': 'T',
        'correct_difference': False,
    },
    'methods': [],
    'grid': {'n_steps': [5, 6, 7, 8, 10], 'scheme': 'uniform-logSNR'},
    'reference': {'n_steps': 1000, 'family': DDIM},
    'convergence': {
        'n_steps': [10, 20, 40, 80],
        'families': list(FAMILIES),
        'reference_family': UNIPC,
        'reference_n_steps': 10000,
        'batch': 64,
    },
    'disentangle': {'periods': 9, 'fine_nfe': 111, 'coarse_nfe': 1, 'batch': 256},
    'batch': 1024,
    'seed': 0,
    'workers': None,
    'output_dir': None,
}

MAX_SEED = 2 ** 64 - 1
MULTISTEP_FAMILIES = (DPM_SOLVER_2M, DPM_SOLVERPP_2M)

_DICT_SECTIONS = ('schedule', 'oracle', 'solver', 'dualfast', 'grid', 'reference', 'convergence')


class ExperimentConfig:
    """Validated experiment settings with canonical serialization for hashing."""

    def __init__(self, data: Optional[dict] = None):
        self._config = _merge(DEFAULTS, data or {})
        self._validate()

    @classmethod
    def load(cls, path: Optional[str] = None) -> 'ExperimentConfig':
        """Read a YAML file; None gives the defaults."""
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            with open(path, encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {e}")
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping")
        return cls(data)

    def with_overrides(self, overrides: dict) -> 'ExperimentConfig':
        """Copy with dotted-path overrides applied, e.g. {'grid.n_steps': [5, 10]}."""
        data = copy.deepcopy(self._config)
        for key, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split('.')
            for part in parents:
                if not isinstance(node.get(part), dict):
                    raise ConfigurationError(f"Cannot override '{key}'")
                node = node[part]
            node[leaf] = value
        return ExperimentConfig(data)

    def _validate(self):
        for section in _DICT_SECTIONS:
            if not isinstance(self._config[section], dict):
                raise ConfigurationError(f"Section '{section}' must be a mapping")
        if not isinstance(self._config['methods'], list):
            raise ConfigurationError("'methods' must be a list of solver settings")
        for key in ('batch', 'seed'):
            if not isinstance(self._config[key], int) or isinstance(self._config[key], bool):
                raise ConfigurationError(f"'{key}' must be an integer")
        if self._config['batch'] < 1:
            raise ConfigurationError("'batch' must be at least 1")
        if not 0 <= self._config['seed'] <= MAX_SEED:
            raise ConfigurationError(f"'seed' must be between 0 and {MAX_SEED}")
        workers = self._config['workers']
        if workers is not None and (not isinstance(workers, int) or workers < 1):
            raise ConfigurationError("'workers' must be a positive integer")
        if not self.n_steps:
            raise ConfigurationError("grid.n_steps must list at least one step count")
        try:
            # builds every component so errors surface at load time
            self.schedule
            self.oracle_for(self.schedule, self.mixture)
            self.methods()
            self.dualfast_config(family=DPM_SOLVER_2M)
            self.reference_solver
            self.disentangle
        except ConfigurationError:
            raise
        except (SamplerError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid experiment configuration: {e}")

    def __getitem__(self, key: str) -> Any:
        if key not in self._config:
            raise ConfigurationError(f"Setting '{key}' not found")
        return self._config[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self._config.get(key, default)

    def to_dict(self) -> dict:
        return copy.deepcopy(self._config)

    def canonical_json(self) -> str:
        return canonical_json(self._config)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    @property
    def seed(self) -> int:
        return self._config['seed']

    @property
    def batch(self) -> int:
        return self._config['batch']

    @property
    def n_steps(self) -> List[int]:
        steps = self._config['grid'].get('n_steps')
        steps = [steps] if isinstance(steps, int) else list(steps or [])
        return [int(n) for n in steps]

    @property
    def scheme(self) -> str:
        return self._config['grid'].get('scheme', 'uniform-logSNR')

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self._config['schedule'])

    @property
    def mixture(self) -> GaussianMixture:
        spec = self._config['mixture']
        if spec == 'reference':
            return GaussianMixture.reference()
        if isinstance(spec, dict):
            if spec.get('preset') == 'standard-normal':
                return GaussianMixture.standard_normal(int(spec.get('dim', 2)))
            return GaussianMixture.from_dict(spec)
        raise ConfigurationError(f"Unknown mixture specification: {spec!r}")

    @property
    def oracle_spec(self) -> dict:
        return dict(self._config['oracle'])

    def oracle_for(self, schedule: NoiseSchedule, mixture: GaussianMixture) -> NoiseOracle:
        spec = dict(self._config['oracle'])
        kind = spec.pop('kind', PERTURBED)
        if kind == EXACT:
            return ExactNoiseOracle(mixture, schedule)
        if kind == PERTURBED:
            return PerturbedNoiseOracle(mixture, schedule, **spec)
        raise ConfigurationError(f"Unknown oracle kind '{kind}', expected '{EXACT}' or '{PERTURBED}'")

    @property
    def dualfast_enabled(self) -> bool:
        return bool(self._config['dualfast'].get('enabled', False))

    def dualfast_config(self, section: Optional[dict] = None, family: Optional[str] = None) -> DualFastConfig:
        """Correction settings for a solver family.

        The second-order multistep families take `multistep_mix_schedule` in place of
        `mix_schedule`.
        """
        section = dict(self._config['dualfast'] if section is None else section)
        section.pop('enabled', None)
        mix = str(section.pop('mix_schedule', 'linear'))
        multistep_mix = section.pop('multistep_mix_schedule', None)
        if family in MULTISTEP_FAMILIES and multistep_mix is not None:
            mix = str(multistep_mix)
        tau = section.pop('tau', 'T')
        base = DualFastConfig(**section)
        return parse_tau(str(tau), self.schedule, parse_mix_schedule(mix, base))

    @property
    def solver(self) -> SolverConfig:
        """The configured solver, with the correction attached when enabled."""
        base = SolverConfig.from_dict(self._config['solver'])
        return attach(base, self.dualfast_config(family=base.family)) if self.dualfast_enabled else base

    def methods(self) -> List[SolverConfig]:
        """Methods to compare: the explicit list, else the base solver and its corrected form."""
        if self._config['methods']:
            result = []
            for entry in self._config['methods']:
                entry = dict(entry)
                dual = entry.pop('dualfast', None)
                config = SolverConfig.from_dict(entry)
                if dual:
                    dual = dict(dual) if isinstance(dual, dict) else {}
                    if 'mix_schedule' in dual:
                        dual.setdefault('multistep_mix_schedule', dual['mix_schedule'])
                    section = _merge(self._config['dualfast'], dual, 'dualfast')
                    config = attach(config, self.dualfast_config(section, config.family))
                result.append(config)
            return result
        base = SolverConfig.from_dict(self._config['solver'])
        if self.dualfast_enabled:
            return [base, attach(base, self.dualfast_config(family=base.family))]
        return [base]

    @property
    def reference_n_steps(self) -> int:
        return int(self._config['reference']['n_steps'])

    @property
    def reference_solver(self) -> SolverConfig:
        return SolverConfig(family=self._config['reference'].get('family', DDIM))

    @property
    def convergence(self) -> dict:
        return dict(self._config['convergence'])

    @property
    def disentangle(self) -> DisentangleConfig:
        section = dict(self._config['disentangle'])
        oracle = self._config['oracle']
        section.setdefault('bias_scale', oracle.get('bias_scale', 0.15))
        section.setdefault('drift_scale', oracle.get('drift_scale', 0.05))
        section.setdefault('direction_seed', oracle.get('direction_seed', 0))
        section.setdefault('seed', self.seed)
        return DisentangleConfig.from_dict(section)

    @property
    def workers(self) -> Optional[int]:
        return self._config['workers']

    @property
    def output_dir(self) -> Optional[str]:
        return self._config['output_dir']


def canonical_json(data: Any) -> str:
    """Sorted, whitespace-free JSON used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def _merge(defaults: Any, data: Any, path: str = '') -> Any:
    """Recursive merge; keys absent from a defaults mapping are rejected."""
    if not isinstance(defaults, dict) or not isinstance(data, dict):
        return copy.deepcopy(data)
    # open sections whose keys belong to the component they configure
    open_section = path in ('solver', 'schedule', 'disentangle', 'oracle')
    merged = copy.deepcopy(defaults)
    for key, value in data.items():
        if key not in defaults and not open_section:
            where = f"in '{path}'" if path else 'at top level'
            raise ConfigurationError(f"Unknown configuration key '{key}' {where}")
        child = f"{path}.{key}" if path else key
        merged[key] = _merge(defaults.get(key), value, child) if key in defaults else copy.deepcopy(value)
    return merged

"""
Noise-prediction oracles built on analytic Gaussian-mixture scores.

The time-t marginal of a mixture sum_i w_i N(mu_i, Sigma_i) under the VP kernel is
sum_i w_i N(alpha_t mu_i, alpha_t^2 Sigma_i + sigma_t^2 I), so the exact noise
prediction eps*(x, t) = -sigma_t grad log q_t(x) is available in closed form.
"""

import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from app.exceptions import NumericError, SingularityError, ValidationError
from app.schedule import NoiseSchedule

EXACT = 'exact'
PERTURBED = 'perturbed'
COUNTING = 'counting-wrapper'

_SINGULAR_FLOOR = 1e-15

Seed = Union[int, Sequence[int], np.random.SeedSequence]


def make_rng(seed: Seed) -> np.random.Generator:
    """Seeded, platform-stable PCG64 stream."""
    return np.random.Generator(np.random.PCG64(seed))


class GaussianMixture:
    """Finite mixture of full-covariance Gaussians in `dim` dimensions."""

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.covariances = np.asarray(covariances, dtype=float)
        self._validate()
        self._chol = [np.linalg.cholesky(cov) for cov in self.covariances]

    def _validate(self):
        n_comp = self.weights.shape[0]
        if self.weights.ndim != 1 or n_comp < 1:
            raise ValidationError("Mixture weights must be a non-empty vector")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValidationError("Mixture weights must be positive and sum to 1")
        if self.means.shape[0] != n_comp:
            raise ValidationError("One mean per mixture component is required")
        dim = self.means.shape[1]
        if self.covariances.shape != (n_comp, dim, dim):
            raise ValidationError(
                f"Covariances must have shape {(n_comp, dim, dim)}, got {self.covariances.shape}"
            )
        for cov in self.covariances:
            if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
                raise ValidationError("Covariance matrices must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValidationError("Covariance matrices must be positive-definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def reference(cls) -> 'GaussianMixture':
        """2-D, 3-component mixture used by the default experiments."""
        scales = (1.0, 0.5, 0.25)
        return cls(
            weights=[0.5, 0.3, 0.2],
            means=[[-3.0, 0.0], [3.0, 1.0], [0.0, 4.0]],
            covariances=[s * np.eye(2) for s in scales],
        )

    @classmethod
    def standard_normal(cls, dim: int) -> 'GaussianMixture':
        return cls(weights=[1.0], means=[np.zeros(dim)], covariances=[np.eye(dim)])

    @classmethod
    def from_dict(cls, data: dict) -> 'GaussianMixture':
        try:
            return cls(data['weights'], data['means'], data['covariances'])
        except KeyError as e:
            raise ValidationError(f"Mixture definition missing field {e}")

    def to_dict(self) -> dict:
        return {
            'weights': self.weights.tolist(),
            'means': self.means.tolist(),
            'covariances': self.covariances.tolist(),
        }

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Total covariance sum_i w_i (Sigma_i + mu_i mu_i^T) - m m^T."""
        m = self.mean()
        second = np.einsum('k,kij->ij', self.weights, self.covariances)
        second += np.einsum('k,ki,kj->ij', self.weights, self.means, self.means)
        return second - np.outer(m, m)

    def marginal_params(self, schedule: NoiseSchedule, t: float
                        ) -> List[Tuple[float, np.ndarray, np.ndarray]]:
        """Per-component (weight, alpha_t mu_i, alpha_t^2 Sigma_i + sigma_t^2 I) of q_t."""
        alpha, sigma = schedule.alpha_sigma(t)
        eye = np.eye(self.dim)
        return [
            (float(w), alpha * mu, alpha * alpha * cov + sigma * sigma * eye)
            for w, mu, cov in zip(self.weights, self.means, self.covariances)
        ]

    def _component_terms(self, schedule: NoiseSchedule, x: np.ndarray, t: float):
        """Log joint densities (B, K) and precision-weighted residuals (K, B, d)."""
        log_joint = []
        solved = []
        for w, mean, cov in self.marginal_params(schedule, t):
            factor = cho_factor(cov, lower=True)
            diff = x - mean
            sol = cho_solve(factor, diff.T).T
            quad = np.sum(diff * sol, axis=1)
            log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
            log_joint.append(
                math.log(w) - 0.5 * (self.dim * math.log(2.0 * math.pi) + log_det + quad)
            )
            solved.append(sol)
        return np.stack(log_joint, axis=1), np.stack(solved, axis=0)

    def log_density(self, schedule: NoiseSchedule, x, t: float) -> np.ndarray:
        """log q_t(x) for a batch (B, d) or a single vector (d,)."""
        x, single = _as_batch(x, self.dim)
        log_joint, _ = self._component_terms(schedule, x, t)
        result = logsumexp(log_joint, axis=1)
        return result[0] if single else result

    def exact_noise(self, schedule: NoiseSchedule, x, t: float) -> np.ndarray:
        """eps*(x, t) = -sigma_t grad log q_t(x), responsibilities via log-sum-exp."""
        x, single = _as_batch(x, self.dim)
        _check_finite(x, "oracle input")
        _, sigma = schedule.alpha_sigma(t)
        log_joint, solved = self._component_terms(schedule, x, t)
        resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        # grad log q_t = -sum_i r_i C_i^{-1} (x - m_i)
        noise = sigma * np.einsum('bk,kbd->bd', resp, solved)
        return noise[0] if single else noise

    def sample(self, n: int, seed: Seed) -> np.ndarray:
        """Draw n samples x_0 from the mixture."""
        if n < 1:
            raise ValidationError(f"Sample count must be at least 1, got {n}")
        rng = make_rng(seed)
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.stack(self._chol)
        return self.means[labels] + np.einsum('bij,bj->bi', chol[labels], z)


def sample_data(mixture: GaussianMixture, n: int, seed: Seed) -> np.ndarray:
    return mixture.sample(n, seed)


def forward_perturb(schedule: NoiseSchedule, x0, t: float, seed: Seed) -> np.ndarray:
    """x_t = alpha_t x_0 + sigma_t eps with eps drawn from a seeded stream."""
    x0 = np.asarray(x0, dtype=float)
    alpha, sigma = schedule.alpha_sigma(t)
    noise = make_rng(seed).standard_normal(x0.shape)
    return alpha * x0 + sigma * noise


def noise_to_data(schedule: NoiseSchedule, x, t: float, noise_pred) -> np.ndarray:
    """x_theta = (x_t - sigma_t eps_theta) / alpha_t."""
    alpha, sigma = schedule.alpha_sigma(t)
    if alpha < _SINGULAR_FLOOR:
        raise SingularityError(f"alpha_t = {alpha} too small to convert at t={t}")
    return (np.asarray(x) - sigma * np.asarray(noise_pred)) / alpha


def data_to_noise(schedule: NoiseSchedule, x, t: float, data_pred) -> np.ndarray:
    """eps_theta = (x_t - alpha_t x_theta) / sigma_t."""
    alpha, sigma = schedule.alpha_sigma(t)
    if sigma < _SINGULAR_FLOOR:
        raise SingularityError(f"sigma_t = {sigma} too small to convert at t={t}")
    return (np.asarray(x) - alpha * np.asarray(data_pred)) / sigma


@dataclass(frozen=True)
class PredictionPair:
    """Noise and data predictions derived from one evaluation at (x_t, t)."""

    noise_pred: np.ndarray
    data_pred: np.ndarray
    t: float


class NoiseOracle(ABC):
    """Evaluable stand-in for the noise-prediction network eps_theta(x, t)."""

    kind: str = ''

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule):
        self.mixture = mixture
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @abstractmethod
    def predict_noise(self, x, t: float) -> np.ndarray:
        """Return eps_theta(x, t) for a batch (B, d) or a vector (d,)."""
        pass

    def predict(self, x, t: float) -> PredictionPair:
        """One evaluation, returned in both prediction modes."""
        noise = self.predict_noise(x, t)
        return PredictionPair(
            noise_pred=noise,
            data_pred=noise_to_data(self.schedule, x, t, noise),
            t=float(t),
        )

    def spec(self) -> dict:
        return {'kind': self.kind}


class ExactNoiseOracle(NoiseOracle):
    """The true noise prediction of the mixture marginal."""

    kind = EXACT

    def predict_noise(self, x, t: float) -> np.ndarray:
        return self.mixture.exact_noise(self.schedule, x, t)


class PerturbedNoiseOracle(NoiseOracle):
    """eps_hat = (1 + b(t)) eps* + a(t) u, with b, a vanishing linearly at t = 1."""

    kind = PERTURBED

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule,
                 bias_scale: float = 0.15, drift_scale: float = 0.05, direction_seed: int = 0):
        super().__init__(mixture, schedule)
        self.bias_scale = float(bias_scale)
        self.drift_scale = float(drift_scale)
        self.direction_seed = int(direction_seed)
        direction = make_rng(self.direction_seed).standard_normal(mixture.dim)
        self.direction = direction / np.linalg.norm(direction)

    def predict_noise(self, x, t: float) -> np.ndarray:
        exact = self.mixture.exact_noise(self.schedule, x, t)
        decay = 1.0 - float(t)
        return (1.0 + self.bias_scale * decay) * exact + (self.drift_scale * decay) * self.direction

    def spec(self) -> dict:
        return {
            'kind': self.kind,
            'bias_scale': self.bias_scale,
            'drift_scale': self.drift_scale,
            'direction_seed': self.direction_seed,
        }


class CountingOracle(NoiseOracle):
    """Wraps another oracle and counts evaluations, one per batch row."""

    kind = COUNTING

    def __init__(self, inner: NoiseOracle):
        super().__init__(inner.mixture, inner.schedule)
        self.inner = inner
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0

    def predict_noise(self, x, t: float) -> np.ndarray:
        rows = 1 if np.ndim(x) == 1 else np.shape(x)[0]
        with self._lock:
            self._count += rows
        return self.inner.predict_noise(x, t)

    def spec(self) -> dict:
        return self.inner.spec()


def _as_batch(x, dim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValidationError(f"Expected points of dimension {dim}, got shape {x.shape}")
    return x, single


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"Non-finite {what}")

"""
Paired-error and mixture-moment metrics.
"""

import math
from typing import Sequence, Tuple

import numpy as np

from app.exceptions import NumericError, ValidationError
from app.oracle import GaussianMixture


def paired_mse(samples, reference) -> float:
    """Mean over batch and dimensions of (x - x_ref)^2."""
    samples, reference = _paired(samples, reference)
    return float(np.mean((samples - reference) ** 2))


def endpoint_error(samples, reference) -> float:
    """Root-mean-square distance over batch and dimensions."""
    return math.sqrt(paired_mse(samples, reference))


def mean_error(samples, mixture: GaussianMixture) -> float:
    """||empirical mean - mixture mean|| / sqrt(tr Sigma)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    diff = samples.mean(axis=0) - mixture.mean()
    return float(np.linalg.norm(diff) / math.sqrt(np.trace(mixture.covariance())))


def cov_frobenius_error(samples, mixture: GaussianMixture) -> float:
    """Relative Frobenius error of the empirical covariance."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        raise ValidationError("Covariance error needs at least two samples")
    target = mixture.covariance()
    empirical = np.atleast_2d(np.cov(samples, rowvar=False))
    return float(np.linalg.norm(empirical - target) / np.linalg.norm(target))


def fit_order(n_steps: Sequence[int], errors: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope of log(error) against log(1/N), and its R^2."""
    if len(n_steps) < 3:
        raise ValidationError(f"A convergence fit needs at least 3 step counts, got {len(n_steps)}")
    if len(n_steps) != len(errors):
        raise ValidationError("One error per step count is required")
    errors = np.asarray(errors, dtype=float)
    if not np.all(np.isfinite(errors)) or np.any(errors <= 0):
        raise NumericError(f"Convergence errors must be finite and positive, got {errors.tolist()}")
    x = np.log(1.0 / np.asarray(n_steps, dtype=float))
    y = np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - np.sum(residual ** 2) / total if total > 0 else 1.0
    return float(slope), float(r_squared)


def _paired(samples, reference):
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if samples.shape != reference.shape:
        raise ValidationError(f"Paired arrays differ in shape: {samples.shape} vs {reference.shape}")
    return samples, reference

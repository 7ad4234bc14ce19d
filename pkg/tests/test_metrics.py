"""
Tests for error metrics and convergence fits.
"""

import math

import numpy as np
import pytest

from app.exceptions import NumericError, ValidationError
from app.metrics import cov_frobenius_error, endpoint_error, fit_order, mean_error, paired_mse
from app.oracle import GaussianMixture


@pytest.fixture
def mixture():
    return GaussianMixture.reference()


class TestPairedErrors:
    """Tests for paired_mse and endpoint_error."""

    def test_identical(self):
        """Identical batches have zero MSE."""
        x = np.arange(6.0).reshape(3, 2)
        assert paired_mse(x, x.copy()) == 0.0
        assert endpoint_error(x, x.copy()) == 0.0

    def test_per_dimension_average(self):
        """MSE averages over samples and dimensions."""
        x = np.zeros((2, 2))
        y = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert paired_mse(x, y) == pytest.approx(0.25)
        assert endpoint_error(x, y) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        """Unpaired batches are rejected."""
        with pytest.raises(ValidationError):
            paired_mse(np.zeros((2, 2)), np.zeros((3, 2)))


class TestMomentErrors:
    """Tests for mean_error and cov_frobenius_error."""

    def test_mixture_samples(self, mixture):
        """Exact mixture samples have a small mean error."""
        samples = mixture.sample(50000, 3)
        assert mean_error(samples, mixture) < 0.02
        assert cov_frobenius_error(samples, mixture) < 0.05

    def test_shifted_mean(self, mixture):
        """A shift shows up in the mean error."""
        samples = mixture.sample(2000, 4)
        shift = np.array([1.0, 0.0])
        scale = math.sqrt(np.trace(mixture.covariance()))
        base = mean_error(samples, mixture)
        assert mean_error(samples + shift, mixture) == pytest.approx(
            np.linalg.norm(samples.mean(axis=0) + shift - mixture.mean()) / scale)
        assert mean_error(samples + shift, mixture) > base

    def test_collapsed_samples(self, mixture):
        """Samples at the mean have zero mean error."""
        samples = np.tile(mixture.mean(), (10, 1))
        assert mean_error(samples, mixture) == pytest.approx(0.0, abs=1e-12)
        assert cov_frobenius_error(samples, mixture) == pytest.approx(1.0)

    def test_covariance_needs_two_samples(self, mixture):
        """A covariance needs two samples."""
        with pytest.raises(ValidationError):
            cov_frobenius_error(np.zeros((1, 2)), mixture)


class TestFitOrder:
    """Tests for fit_order."""

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_exact_power_law(self, order):
        """An exact power law is fitted with slope equal to its order and R^2 = 1."""
        steps = [10, 20, 40, 80]
        errors = [5.0 * n ** -order for n in steps]
        slope, r_squared = fit_order(steps, errors)
        assert slope == pytest.approx(order, abs=1e-10)
        assert r_squared == pytest.approx(1.0, abs=1e-12)

    def test_noisy_fit(self):
        """Test a noisy fit."""
        steps = [10, 20, 40, 80]
        errors = [1e-1, 6e-2, 2e-2, 1.1e-2]
        slope, r_squared = fit_order(steps, errors)
        assert 0.8 < slope < 1.4
        assert 0.9 < r_squared < 1.0

    def test_too_few_points(self):
        """A fit needs three points."""
        with pytest.raises(ValidationError):
            fit_order([10, 20], [0.1, 0.05])

    def test_length_mismatch(self):
        """Steps and errors must pair up."""
        with pytest.raises(ValidationError):
            fit_order([10, 20, 40], [0.1, 0.05])

    @pytest.mark.parametrize("errors", [[0.1, 0.0, 0.01], [0.1, float('nan'), 0.01], [0.1, -0.05, 0.01]])
    def test_invalid_errors(self, errors):
        """Zero, negative and non-finite errors are rejected."""
        with pytest.raises(NumericError):
            fit_order([10, 20, 40], errors)

"""
Tests for the approximation/discretization error protocol.
"""

import numpy as np
import pytest

from app.disentangle import (
    CURVE_COLUMNS,
    DisentangleConfig,
    ErrorCurve,
    PeriodRecord,
    emit_curve,
    period_bounds,
    run_disentangle,
)
from app.dualfast import DualFastConfig
from app.exceptions import ConfigurationError, NumericError
from app.oracle import GaussianMixture
from app.schedule import NoiseSchedule
from app.solver import DDIM, UNIPC, SolverConfig


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def mixture():
    return GaussianMixture.reference()


@pytest.fixture(scope='module')
def default_curve():
    """Default layout, perturbation and batch."""
    return run_disentangle(NoiseSchedule(), GaussianMixture.reference(), DisentangleConfig())


class TestDisentangleConfig:
    """Tests for DisentangleConfig."""

    def test_defaults(self):
        """Nine periods of 111 fine steps against one coarse step, UniPC-3 transitions."""
        config = DisentangleConfig()
        assert (config.periods, config.fine_nfe, config.coarse_nfe) == (9, 111, 1)
        assert config.reference_nfe == 1110
        assert config.solver == SolverConfig(family=UNIPC, order=3)

    @pytest.mark.parametrize("kwargs", [
        {'periods': 0},
        {'coarse_nfe': 0},
        {'fine_nfe': 5, 'coarse_nfe': 10},
        {'batch': 0},
        {'reference_nfe': 0},
    ])
    def test_invalid(self, kwargs):
        """Impossible layouts and step counts are rejected."""
        with pytest.raises(ConfigurationError):
            DisentangleConfig(**kwargs)

    def test_rejects_corrected_solver(self):
        """Transitions never carry the correction."""
        with pytest.raises(ConfigurationError):
            DisentangleConfig(solver=SolverConfig(family=DDIM, dualfast=DualFastConfig()))

    def test_dict_round_trip(self):
        """to_dict and from_dict agree."""
        config = DisentangleConfig(periods=3, fine_nfe=20, solver=SolverConfig(family=DDIM))
        assert DisentangleConfig.from_dict(config.to_dict()) == config

    def test_from_dict_rejects_unknown_keys(self):
        """Unknown keys are rejected."""
        with pytest.raises(ConfigurationError):
            DisentangleConfig.from_dict({'periods': 3, 'window': 2})


class TestPeriodBounds:
    """Tests for period_bounds."""

    def test_partition(self, schedule):
        """Periods tile [t_min, t_max] with equal widths."""
        bounds = period_bounds(schedule, 9)
        assert len(bounds) == 9
        assert bounds[0][1] == schedule.t_min
        assert bounds[-1][0] == schedule.t_max
        for (s, t), (s_next, t_next) in zip(bounds, bounds[1:]):
            assert s > t
            assert t_next == s
        widths = [s - t for s, t in bounds]
        assert max(widths) - min(widths) < 1e-12

    def test_single_period(self, schedule):
        """One period covers the whole interval."""
        assert period_bounds(schedule, 1) == [(schedule.t_max, schedule.t_min)]


class TestRunDisentangle:
    """Tests for run_disentangle."""

    def test_exact_oracle_has_no_approximation_error(self, schedule, mixture):
        """With the exact oracle as the approximation only round-off separates the fine runs."""
        config = DisentangleConfig(batch=8, reference_nfe=333, exact_approximation=True)
        curve = run_disentangle(schedule, mixture, config)
        assert len(curve.records) == 9
        assert max(curve.approx_mse) < 1e-8

    def test_equal_step_counts_have_no_discretization_error(self, schedule, mixture):
        """Equal fine and coarse step counts give identical transitions."""
        config = DisentangleConfig(periods=3, fine_nfe=4, coarse_nfe=4, reference_nfe=40, batch=16)
        curve = run_disentangle(schedule, mixture, config)
        assert curve.disc_mse == [0.0, 0.0, 0.0]
        assert all(v > 0 for v in curve.approx_mse)

    def test_default_curves(self, default_curve):
        """Records are ordered by t and both errors are positive."""
        assert [r.period_index for r in default_curve.records] == list(range(9))
        ts = [r.t for r in default_curve.records]
        assert all(a < b for a, b in zip(ts, ts[1:]))
        assert all(v > 0 for v in default_curve.approx_mse)
        assert all(v > 0 for v in default_curve.disc_mse)

    def test_approximation_error_peaks_mid_trajectory(self, default_curve):
        """The oracle error grows away from the data, peaks mid-way and falls strictly toward t = 1."""
        approx = default_curve.approx_mse
        peak = int(np.argmax(approx))
        assert 0 < peak < len(approx) - 1
        tail = approx[peak:]
        assert all(a > b for a, b in zip(tail, tail[1:]))
        assert approx[peak] > 10 * approx[-1]
        assert approx[peak] > 2 * approx[0]

    def test_discretization_error_is_largest_near_data(self, default_curve):
        """One coarse step errs more over the first period than over the second or the last."""
        disc = default_curve.disc_mse
        assert disc[0] > disc[1]
        assert disc[0] > disc[-1]

    def test_error_magnitudes_are_comparable(self, default_curve):
        """The two curves peak within a factor of ten of each other."""
        ratio = max(default_curve.approx_mse) / max(default_curve.disc_mse)
        assert 0.1 <= ratio <= 10.0

    def test_fine_grid_is_converged(self, schedule, mixture):
        """Doubling the fine steps moves the approximation error by under five percent."""
        base = DisentangleConfig(periods=3, fine_nfe=60, reference_nfe=600, batch=16)
        doubled = DisentangleConfig(periods=3, fine_nfe=120, reference_nfe=600, batch=16)
        a = run_disentangle(schedule, mixture, base)
        b = run_disentangle(schedule, mixture, doubled)
        for x, y in zip(a.approx_mse, b.approx_mse):
            assert abs(x - y) < 0.05 * x

    def test_workers_do_not_change_results(self, schedule, mixture):
        """Periods run in threads give the same records."""
        config = DisentangleConfig(periods=4, fine_nfe=10, reference_nfe=50, batch=16)
        serial = run_disentangle(schedule, mixture, config, workers=1)
        parallel = run_disentangle(schedule, mixture, config, workers=3)
        assert serial.records == parallel.records

    def test_seed_changes_samples(self, schedule, mixture):
        """The seed selects the period samples."""
        a = run_disentangle(schedule, mixture, DisentangleConfig(periods=2, fine_nfe=5, reference_nfe=20,
                                                                 batch=8, seed=0))
        b = run_disentangle(schedule, mixture, DisentangleConfig(periods=2, fine_nfe=5, reference_nfe=20,
                                                                 batch=8, seed=1))
        assert a.approx_mse != b.approx_mse


class TestErrorCurve:
    """Tests for ErrorCurve, PeriodRecord and emit_curve."""

    def test_record_validation(self):
        """Non-finite and negative errors are rejected."""
        with pytest.raises(NumericError):
            PeriodRecord(period_index=0, s=0.5, t=0.1, approx_mse=float('nan'), disc_mse=0.0)
        with pytest.raises(NumericError):
            PeriodRecord(period_index=0, s=0.5, t=0.1, approx_mse=0.1, disc_mse=-1.0)

    def test_emit_rows(self, default_curve, tmp_path):
        """One CSV row per period under the curve header."""
        path = emit_curve(default_curve, tmp_path / 'curve.csv')
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == ','.join(CURVE_COLUMNS)
        assert len(lines) == 10
        assert lines[1].startswith('0,')

    def test_emit_empty_curve(self, tmp_path):
        """An empty curve is just the header."""
        path = emit_curve(ErrorCurve(), tmp_path / 'empty.csv')
        assert path.read_text(encoding='utf-8') == 'period_index,s,t,approx_mse,disc_mse\n'

    def test_rerun_is_byte_identical(self, schedule, mixture, tmp_path):
        """A rerun writes the same bytes."""
        config = DisentangleConfig(periods=3, fine_nfe=12, reference_nfe=60, batch=8)
        first = emit_curve(run_disentangle(schedule, mixture, config), tmp_path / 'a.csv')
        second = emit_curve(run_disentangle(schedule, mixture, config), tmp_path / 'b.csv')
        assert first.read_bytes() == second.read_bytes()

    def test_to_frame(self, default_curve):
        """The frame carries the curve columns."""
        frame = default_curve.to_frame()
        assert list(frame.columns) == CURVE_COLUMNS
        assert np.allclose(frame['approx_mse'].to_numpy(), default_curve.approx_mse)

"""
Tests for logger module.
"""

import logging

import pytest

from app.logger import SamplerLogger
from app.settings import HarnessSettings


@pytest.fixture
def settings(tmp_path, monkeypatch):
    """Settings with every directory in a temporary location."""
    monkeypatch.setenv('DUALFAST_LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('DUALFAST_OUTPUT_DIR', str(tmp_path / 'results'))
    monkeypatch.setenv('DUALFAST_CACHE_DIR', str(tmp_path / 'cache'))
    settings = HarnessSettings()
    settings.set('DUALFAST_LOG_FILE', str(tmp_path / 'logs' / 'test.log'))
    return settings


class TestSamplerLogger:
    """Tests for SamplerLogger class."""

    def test_setup(self, settings):
        """Test logger setup."""
        SamplerLogger._logger = None
        logger = SamplerLogger.setup(settings)
        assert isinstance(logger, logging.Logger)
        assert logger.name == 'dualfast'

    def test_setup_is_idempotent(self, settings):
        """Repeated setup does not stack handlers."""
        logger = SamplerLogger.setup(settings)
        count = len(logger.handlers)
        SamplerLogger.setup(settings)
        assert len(logger.handlers) == count

    def test_get_logger_without_setup(self, settings):
        """Test getting logger without setup."""
        SamplerLogger.setup(settings)
        original_logger = SamplerLogger._logger
        SamplerLogger._logger = None
        try:
            with pytest.raises(RuntimeError, match="Logger not initialized"):
                SamplerLogger.get_logger()
        finally:
            SamplerLogger._logger = original_logger

    def test_get_logger_after_setup(self, settings):
        """Test getting logger after setup."""
        SamplerLogger._logger = None
        SamplerLogger.setup(settings)
        assert SamplerLogger.get_logger() is not None

    def test_log_without_setup_is_silent(self):
        """Library code can log before the harness configures logging."""
        original_logger = SamplerLogger._logger
        SamplerLogger._logger = None
        try:
            SamplerLogger.log(logging.INFO, "ignored")
        finally:
            SamplerLogger._logger = original_logger

    def test_log_after_setup(self, settings, caplog):
        """Messages reach the 'dualfast' logger once it is set up."""
        SamplerLogger.setup(settings)
        with caplog.at_level(logging.INFO, logger='dualfast'):
            SamplerLogger.log(logging.INFO, "sampled 5 steps")
        assert "sampled 5 steps" in caplog.text

    def test_new_log_file_replaces_handlers(self, settings, tmp_path):
        """Pointing setup at a new file swaps the handlers instead of adding more."""
        logger = SamplerLogger.setup(settings)
        count = len(logger.handlers)
        settings.set('DUALFAST_LOG_FILE', str(tmp_path / 'other' / 'run.log'))
        SamplerLogger.setup(settings)
        SamplerLogger.log(logging.WARNING, "switched")
        for handler in logger.handlers:
            handler.flush()
        assert len(logger.handlers) == count
        assert "switched" in (tmp_path / 'other' / 'run.log').read_text(encoding='utf-8')
        assert "switched" not in (tmp_path / 'logs' / 'test.log').read_text(encoding='utf-8')

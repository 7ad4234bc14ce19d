"""
Logging for the sampler lab: one 'dualfast' logger with a file and a console handler.
"""

import logging
from pathlib import Path
from typing import Optional

from app.settings import HarnessSettings

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class SamplerLogger:
    """Class-level access to the configured 'dualfast' logger."""

    _logger: Optional[logging.Logger] = None
    _log_file: Optional[str] = None

    @classmethod
    def setup(cls, settings: HarnessSettings) -> logging.Logger:
        """Attach handlers for the settings' log file; a new file replaces the old handlers."""
        logger = logging.getLogger('dualfast')
        logger.setLevel(logging.INFO)
        log_file = str(settings.get('DUALFAST_LOG_FILE'))
        if cls._logger is not None and cls._log_file == log_file and logger.handlers:
            return logger

        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        formatter = logging.Formatter(_FORMAT)
        file_handler = logging.FileHandler(log_file, encoding=settings.get('DUALFAST_DEFAULT_ENCODING', 'utf-8'))
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(formatter)
        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.WARNING)
        console_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

        cls._logger = logger
        cls._log_file = log_file
        return logger

    @classmethod
    def get_logger(cls) -> logging.Logger:
        if cls._logger is None:
            raise RuntimeError("Logger not initialized. Call setup() first.")
        return cls._logger

    @classmethod
    def log(cls, level: int, message: str):
        """Log through the configured logger; a no-op before setup()."""
        if cls._logger is not None:
            cls._logger.log(level, message)

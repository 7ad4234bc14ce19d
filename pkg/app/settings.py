"""
Environment settings loaded from a .env file.
"""

import os
from pathlib import Path
from typing import Any
from dotenv import load_dotenv
from app.exceptions import ConfigurationError


class HarnessSettings:
    """Manages run-time settings (directories, workers, encoding) from a .env file."""

    def __init__(self, env_file: str = '.env'):
        """Initialize settings by loading the .env file."""
        self._config = {}
        self._load_config(env_file)

    def _load_config(self, env_file: str):
        """Load settings from .env file."""
        env_path = Path(env_file)
        if env_path.exists():
            load_dotenv(env_path)

        # Base directories with defaults
        self._config['DUALFAST_LOG_DIR'] = os.getenv(
            'DUALFAST_LOG_DIR',
            os.path.join(os.getcwd(), 'logs')
        )
        self._config['DUALFAST_OUTPUT_DIR'] = os.getenv(
            'DUALFAST_OUTPUT_DIR',
            os.path.join(os.getcwd(), 'results')
        )
        self._config['DUALFAST_CACHE_DIR'] = os.getenv(
            'DUALFAST_CACHE_DIR',
            os.path.join(os.getcwd(), 'cache')
        )

        # Execution settings
        try:
            self._config['DUALFAST_WORKERS'] = int(os.getenv('DUALFAST_WORKERS', '1'))
        except ValueError:
            raise ConfigurationError("DUALFAST_WORKERS must be an integer")
        if self._config['DUALFAST_WORKERS'] < 1:
            raise ConfigurationError("DUALFAST_WORKERS must be at least 1")
        self._config['DUALFAST_AUTO_SAVE'] = os.getenv(
            'DUALFAST_AUTO_SAVE',
            'true'
        ).lower() == 'true'
        self._config['DUALFAST_DEFAULT_ENCODING'] = os.getenv(
            'DUALFAST_DEFAULT_ENCODING',
            'utf-8'
        )

        # File paths
        self._config['DUALFAST_LOG_FILE'] = os.path.join(
            self._config['DUALFAST_LOG_DIR'],
            'dualfast.log'
        )

        self._ensure_directories()

    def _ensure_directories(self):
        """Ensure configured directories exist."""
        Path(self._config['DUALFAST_LOG_DIR']).mkdir(parents=True, exist_ok=True)
        Path(self._config['DUALFAST_OUTPUT_DIR']).mkdir(parents=True, exist_ok=True)
        Path(self._config['DUALFAST_CACHE_DIR']).mkdir(parents=True, exist_ok=True)

    def get(self, key: str, default: Any = None) -> Any:
        """Get a setting value."""
        return self._config.get(key, default)

    def set(self, key: str, value: Any):
        """Override a setting, e.g. from a command-line flag."""
        self._config[key] = value

    def __getitem__(self, key: str) -> Any:
        """Get a setting value using bracket notation."""
        if key not in self._config:
            raise ConfigurationError(f"Setting '{key}' not found")
        return self._config[key]

"""
Input validation utilities for command-line and configuration values.
"""

from typing import List, Union

from app.exceptions import ValidationError
from app.solver import FAMILIES

_U64_MAX = 2 ** 64 - 1


class InputValidator:
    """Validates user inputs for experiment commands."""

    def __init__(self, max_steps: int = 100000, max_batch: int = 10 ** 7):
        """Initialize validator with upper bounds for step counts and batch sizes."""
        self.max_steps = max_steps
        self.max_batch = max_batch

    def validate_int(self, value: Union[str, int], name: str, minimum: int = 0,
                     maximum: int = None) -> int:
        """Validate and convert a value to a bounded integer."""
        try:
            number = int(str(value).strip())
        except (ValueError, TypeError):
            raise ValidationError(f"Invalid {name}: {value}")
        if number < minimum:
            raise ValidationError(f"{name} must be at least {minimum}, got {number}")
        if maximum is not None and number > maximum:
            raise ValidationError(f"{name} {number} exceeds maximum allowed value: {maximum}")
        return number

    def validate_seed(self, value: Union[str, int]) -> int:
        return self.validate_int(value, 'seed', 0, _U64_MAX)

    def validate_batch(self, value: Union[str, int]) -> int:
        return self.validate_int(value, 'batch', 1, self.max_batch)

    def validate_step_counts(self, value: Union[str, int, List[int]]) -> List[int]:
        """Parse '5,6,7' (or a list) into step counts, keeping the given order."""
        if isinstance(value, str):
            parts = [p for p in value.replace(' ', '').split(',') if p]
        elif isinstance(value, int):
            parts = [value]
        else:
            parts = list(value)
        if not parts:
            raise ValidationError("At least one step count is required")
        counts = [self.validate_int(p, 'step count', 1, self.max_steps) for p in parts]
        if len(set(counts)) != len(counts):
            raise ValidationError(f"Duplicate step counts in {counts}")
        return counts

    def validate_family(self, family: str) -> str:
        """Validate solver family name."""
        if not isinstance(family, str) or not family.strip():
            raise ValidationError("Solver family cannot be empty")
        family = family.strip().lower()
        if family not in FAMILIES:
            raise ValidationError(f"Unknown solver family '{family}', expected one of {FAMILIES}")
        return family

    def validate_switch(self, value: str, name: str = 'switch') -> bool:
        """Validate an on/off flag."""
        text = str(value).strip().lower()
        if text in ('on', 'true', 'yes', '1'):
            return True
        if text in ('off', 'false', 'no', '0'):
            return False
        raise ValidationError(f"{name} must be 'on' or 'off', got '{value}'")

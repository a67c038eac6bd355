"""
Input validation for user-supplied run settings.
Every check returns (is_valid, message) so callers decide how to surface the failure.
"""

import math
from typing import Sequence, Tuple

from utils.logger import logger


class ValidationManager:
    """Validates numbers that arrive from the command line or a config file"""

    def _fail(self, field: str, message: str) -> Tuple[bool, str]:
        logger.warning(f"Invalid setting {field}: {message}")
        return False, f"{field}: {message}"

    def _finite(self, field: str, value: float) -> Tuple[bool, str]:
        if value is None or not math.isfinite(value):
            return self._fail(field, f"must be a finite number, got {value}")
        return True, ""

    def validate_dominance(self, delta: float) -> Tuple[bool, str]:
        """Dominance must lie in [0, 1]"""
        ok, msg = self._finite("dominance", delta)
        if not ok:
            return ok, msg
        if not 0.0 <= delta <= 1.0:
            return self._fail("dominance", f"must be in [0, 1], got {delta}")
        return True, "ok"

    def validate_positive(self, field: str, value: float) -> Tuple[bool, str]:
        """Learning rate, gamma, noise scale, density and similar must be > 0"""
        ok, msg = self._finite(field, value)
        if not ok:
            return ok, msg
        if value <= 0:
            return self._fail(field, f"must be positive, got {value}")
        return True, "ok"

    def validate_non_negative(self, field: str, value: float) -> Tuple[bool, str]:
        ok, msg = self._finite(field, value)
        if not ok:
            return ok, msg
        if value < 0:
            return self._fail(field, f"must be non-negative, got {value}")
        return True, "ok"

    def validate_probability(self, field: str, value: float, closed_right: bool = False) -> Tuple[bool, str]:
        """Thresholds in (0, 1), or (0, 1] when closed_right"""
        ok, msg = self._finite(field, value)
        if not ok:
            return ok, msg
        upper_ok = value <= 1.0 if closed_right else value < 1.0
        if value <= 0.0 or not upper_ok:
            bracket = "]" if closed_right else ")"
            return self._fail(field, f"must be in (0, 1{bracket}, got {value}")
        return True, "ok"

    def validate_fractions(self, fractions: Sequence[float]) -> Tuple[bool, str]:
        """Split fractions are non-negative and sum to 1"""
        if len(fractions) != 3:
            return self._fail("fractions", f"expected 3 values, got {len(fractions)}")
        if any((not math.isfinite(f)) or f < 0 for f in fractions):
            return self._fail("fractions", f"must be finite and non-negative, got {list(fractions)}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            return self._fail("fractions", f"must sum to 1, got {sum(fractions)}")
        return True, "ok"

    def validate_choice(self, field: str, value: str, choices: Sequence[str]) -> Tuple[bool, str]:
        if value not in choices:
            return self._fail(field, f"must be one of {list(choices)}, got {value!r}")
        return True, "ok"


# Global validation manager instance
validation_manager = ValidationManager()

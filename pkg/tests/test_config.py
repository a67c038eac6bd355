"""
Tests for environment-driven settings and input validation.
"""

from unittest.mock import patch

import dgm
from config import Config
from utils.validation import validation_manager


class TestConfig:
    """Test configuration management"""

    def test_defaults_are_valid(self):
        validation = Config.validate_config()
        assert validation["is_valid"]
        assert validation["missing_required"] == []

    def test_invalid_dominance(self):
        with patch.object(Config, "DOMINANCE", 1.5):
            validation = Config.validate_config()
            assert not validation["is_valid"]
            assert "DGM_DOMINANCE" in validation["missing_required"]

    def test_shallow_encoder(self):
        with patch.object(Config, "ENCODER_DEPTH", 1):
            assert "DGM_ENCODER_DEPTH" in Config.validate_config()["missing_required"]

    def test_unknown_log_level_is_a_warning(self):
        with patch.object(Config, "LOG_LEVEL", "CHATTY"):
            validation = Config.validate_config()
            assert validation["is_valid"]
            assert len(validation["warnings"]) >= 1

    def test_invalid_environment_stops_the_cli(self):
        with patch.object(Config, "GAMMA", 0.0):
            assert dgm.main(["gradcheck"]) == 1


class TestValidationManager:
    """Test user-supplied number checks"""

    def test_dominance(self):
        assert validation_manager.validate_dominance(0.0)[0]
        assert validation_manager.validate_dominance(1.0)[0]
        assert not validation_manager.validate_dominance(1.01)[0]
        assert not validation_manager.validate_dominance(float("inf"))[0]

    def test_positive(self):
        ok, message = validation_manager.validate_positive("gamma", -0.5)
        assert not ok
        assert "gamma" in message

    def test_probability_bounds(self):
        assert not validation_manager.validate_probability("threshold", 1.0)[0]
        assert validation_manager.validate_probability("miou", 1.0, closed_right=True)[0]
        assert not validation_manager.validate_probability("miou", 0.0, closed_right=True)[0]

    def test_fractions(self):
        assert validation_manager.validate_fractions([0.8, 0.1, 0.1])[0]
        assert not validation_manager.validate_fractions([0.8, 0.1])[0]
        assert not validation_manager.validate_fractions([0.9, 0.2, -0.1])[0]

    def test_choice(self):
        assert validation_manager.validate_choice("averaging", "micro", ["micro", "macro"])[0]
        assert not validation_manager.validate_choice("averaging", "weighted", ["micro", "macro"])[0]

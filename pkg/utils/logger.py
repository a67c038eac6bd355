"""
Logging configuration for the DGM training engine.
Provides centralized logging with proper formatting and log levels.
"""

import logging
import os
from datetime import datetime
from typing import Dict, Optional
from config import Config


class DGMLogger:
    """Centralized logger for the DGM training engine"""

    def __init__(self, name: str = "DGM"):
        self.name = name
        self.logger = logging.getLogger(name)
        self._setup_logger()

    def _setup_logger(self):
        """Setup logger with file and console handlers"""
        # Prevent duplicate handlers
        if self.logger.handlers:
            return

        self.logger.setLevel(getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))

        log_dir = os.path.dirname(Config.LOG_FILE)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        )

        file_handler = logging.FileHandler(Config.LOG_FILE)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(formatter)

        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

    def info(self, message: str, extra: Optional[dict] = None):
        """Log info message"""
        self.logger.info(message, extra=extra)

    def error(self, message: str, exc_info: bool = True, extra: Optional[dict] = None):
        """Log error message"""
        self.logger.error(message, exc_info=exc_info, extra=extra)

    def warning(self, message: str, extra: Optional[dict] = None):
        """Log warning message"""
        self.logger.warning(message, extra=extra)

    def debug(self, message: str, extra: Optional[dict] = None):
        """Log debug message"""
        self.logger.debug(message, extra=extra)

    def log_epoch(self, run_id: str, epoch: int, losses: Dict[str, float], lr: float):
        """Log the per-modality losses of a finished epoch"""
        log_data = {
            'run_id': run_id,
            'epoch': epoch,
            'lr': lr,
            'timestamp': datetime.now().isoformat()
        }
        log_data.update({f"loss_{k}": v for k, v in losses.items()})
        summary = " ".join(f"{k}={v:.5f}" for k, v in losses.items())
        self.info(f"[{run_id}] epoch {epoch} lr={lr:.2e} {summary}", extra=log_data)

    def log_imbalance(self, epoch: int, batch: int, report):
        """Log the imbalance ratio and coefficients of one batch"""
        omega_v_minus_a, mu_a, mu_v = report.omega_v_minus_a, report.mu_a, report.mu_v
        log_data = {
            'epoch': epoch,
            'batch': batch,
            'omega_v_minus_a': omega_v_minus_a,
            'mu_a': mu_a,
            'mu_v': mu_v,
            'timestamp': datetime.now().isoformat()
        }
        self.debug(
            f"epoch {epoch} batch {batch} omega_v-a={omega_v_minus_a:.4f} mu_a={mu_a:.4f} mu_v={mu_v:.4f}",
            extra=log_data
        )

    def log_check(self, name: str, error: float, passed: bool):
        """Log the outcome of a gradient check"""
        log_data = {
            'check': name,
            'max_relative_error': error,
            'passed': passed,
            'timestamp': datetime.now().isoformat()
        }
        if passed:
            self.info(f"Gradient check passed - {name} - max rel err {error:.3e}", extra=log_data)
        else:
            self.warning(f"Gradient check FAILED - {name} - max rel err {error:.3e}", extra=log_data)


# Global logger instance
logger = DGMLogger()

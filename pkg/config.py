"""
Configuration management for the DGM training engine.
Centralizes all default settings so every entry point reads them from one place.
"""

import os
from typing import Dict, Any
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Configuration class for the DGM training engine"""

    # === PATHS ===
    DATA_DIR = os.getenv("DGM_DATA_DIR", "data/synthetic")
    OUTPUT_DIR = os.getenv("DGM_OUTPUT_DIR", "runs")

    # === MODEL DEFAULTS ===
    HIDDEN_DIM = int(os.getenv("DGM_HIDDEN_DIM", "512"))
    ENCODER_DEPTH = int(os.getenv("DGM_ENCODER_DEPTH", "2"))
    LOGIT_CLAMP = float(os.getenv("DGM_LOGIT_CLAMP", "16.0"))

    # === OPTIMIZER DEFAULTS ===
    LEARNING_RATE = float(os.getenv("DGM_LEARNING_RATE", "5e-4"))
    GAMMA = float(os.getenv("DGM_GAMMA", "0.1"))
    LR_DECAY = float(os.getenv("DGM_LR_DECAY", "0.25"))
    LR_DECAY_EVERY = int(os.getenv("DGM_LR_DECAY_EVERY", "6"))
    EPOCHS = int(os.getenv("DGM_EPOCHS", "25"))
    BATCH_SIZE = int(os.getenv("DGM_BATCH_SIZE", "64"))
    OMEGA_CLIP = (1e-3, 1e3)

    # === SYNTHETIC DATA DEFAULTS ===
    TRAIN_VIDEOS = int(os.getenv("DGM_TRAIN_VIDEOS", "2000"))
    VAL_VIDEOS = int(os.getenv("DGM_VAL_VIDEOS", "200"))
    TEST_VIDEOS = int(os.getenv("DGM_TEST_VIDEOS", "200"))
    SNIPPETS = int(os.getenv("DGM_SNIPPETS", "10"))
    CLASSES = int(os.getenv("DGM_CLASSES", "8"))
    AUDIO_DIM = int(os.getenv("DGM_AUDIO_DIM", "128"))
    VISUAL_DIM = int(os.getenv("DGM_VISUAL_DIM", "512"))
    DOMINANCE = float(os.getenv("DGM_DOMINANCE", "0.6"))
    NOISE_SCALE = float(os.getenv("DGM_NOISE_SCALE", "1.0"))
    EVENT_DENSITY = float(os.getenv("DGM_EVENT_DENSITY", "1.5"))

    # === EVALUATION ===
    THRESHOLD = float(os.getenv("DGM_THRESHOLD", "0.5"))
    EVENT_IOU = float(os.getenv("DGM_EVENT_IOU", "0.5"))

    # === GRADIENT CHECK ===
    GRADCHECK_STEP = float(os.getenv("DGM_GRADCHECK_STEP", "1e-4"))
    GRADCHECK_TOLERANCE = float(os.getenv("DGM_GRADCHECK_TOLERANCE", "1e-3"))

    # === ABLATION ===
    ABLATION_RETRIES = int(os.getenv("DGM_ABLATION_RETRIES", "2"))
    ABLATION_WORKERS = int(os.getenv("DGM_ABLATION_WORKERS", "1"))

    # === LOGGING CONFIGURATION ===
    LOG_LEVEL = os.getenv("DGM_LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("DGM_LOG_FILE", "logs/dgm.log")

    @classmethod
    def validate_config(cls) -> Dict[str, Any]:
        """Validate configuration and return any invalid settings"""
        invalid = []
        warnings = []

        if cls.HIDDEN_DIM <= 0:
            invalid.append("DGM_HIDDEN_DIM")
        if cls.ENCODER_DEPTH < 2:
            invalid.append("DGM_ENCODER_DEPTH")
        if cls.LEARNING_RATE <= 0:
            invalid.append("DGM_LEARNING_RATE")
        if cls.GAMMA <= 0:
            invalid.append("DGM_GAMMA")
        if not 0.0 <= cls.DOMINANCE <= 1.0:
            invalid.append("DGM_DOMINANCE")
        if not 0.0 < cls.THRESHOLD < 1.0:
            invalid.append("DGM_THRESHOLD")
        if not 0.0 < cls.EVENT_IOU <= 1.0:
            invalid.append("DGM_EVENT_IOU")
        if cls.GRADCHECK_STEP <= 0:
            invalid.append("DGM_GRADCHECK_STEP")

        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            warnings.append(f"Unknown log level {cls.LOG_LEVEL}, INFO will be used")
        if cls.BATCH_SIZE > cls.TRAIN_VIDEOS:
            warnings.append("Batch size exceeds the default training split")

        return {
            "missing_required": invalid,
            "warnings": warnings,
            "is_valid": len(invalid) == 0
        }

    @classmethod
    def print_current_config(cls):
        """Print current configuration for debugging"""
        print("\nCurrent Configuration:")
        print(f"   Hidden dim: {cls.HIDDEN_DIM}")
        print(f"   Learning rate: {cls.LEARNING_RATE} (x{cls.LR_DECAY} every {cls.LR_DECAY_EVERY} epochs)")
        print(f"   Gamma: {cls.GAMMA}")
        print(f"   Epochs / batch: {cls.EPOCHS} / {cls.BATCH_SIZE}")
        print(f"   Splits: {cls.TRAIN_VIDEOS}/{cls.VAL_VIDEOS}/{cls.TEST_VIDEOS}")
        print(f"   Dominance: {cls.DOMINANCE}")
        print(f"   Output dir: {cls.OUTPUT_DIR}")
        print(f"   Log Level: {cls.LOG_LEVEL}")


if __name__ == "__main__":
    Config.print_current_config()
    validation = Config.validate_config()
    print(f"\nValidation result: {validation}")

import os
import logging
from pathlib import Path
from typing import Dict, Optional

logger = logging.getLogger(__name__)

APP_NAME = "maskgan"
APP_VERSION = "1.0.0"

# Defaults for the desk-scale configuration
DEFAULT_IMAGE_SIZE = 32
DEFAULT_CHECKPOINT_EVERY = 25
CHECKPOINT_FILENAME = "checkpoint.mgan"
LOSS_CSV_FILENAME = "losses.csv"
MANIFEST_FILENAME = "manifest.json"


class ConfigFileError(ValueError):
    """Raised when a key=value config file cannot be parsed."""


class Settings:
    """Environment-backed settings."""

    def __init__(self) -> None:
        logger.info("=== MASKGAN VARIABLE LOADING ===")

        # Reproducibility
        self.DEFAULT_SEED = int(os.getenv("MASKGAN_SEED", "0"))

        # Logging
        self.LOG_LEVEL = os.getenv("MASKGAN_LOG_LEVEL", "INFO").upper()

        # Training
        self.CHECKPOINT_EVERY = int(os.getenv("MASKGAN_CHECKPOINT_EVERY", str(DEFAULT_CHECKPOINT_EVERY)))

        # Data loading
        self.LOAD_CONCURRENCY = int(os.getenv("MASKGAN_LOAD_CONCURRENCY", "16"))

        # Inference service
        self.CHECKPOINT_PATH = os.getenv("MASKGAN_CHECKPOINT", os.path.join("runs", "latest", CHECKPOINT_FILENAME))
        self.ALLOWED_ORIGINS = os.getenv("MASKGAN_ALLOWED_ORIGINS", "http://localhost:5173,http://localhost:3000")
        self.MAX_UPLOAD_BYTES = int(os.getenv("MASKGAN_MAX_UPLOAD_BYTES", str(10 * 1024 * 1024)))
        self.REQUESTS_PER_MINUTE = int(os.getenv("MASKGAN_REQUESTS_PER_MINUTE", "60"))

        self._log_loaded_variables()

    def _log_loaded_variables(self):
        """Log which variables came from the environment."""
        variables = {
            "MASKGAN_SEED": self.DEFAULT_SEED,
            "MASKGAN_LOG_LEVEL": self.LOG_LEVEL,
            "MASKGAN_CHECKPOINT_EVERY": self.CHECKPOINT_EVERY,
            "MASKGAN_LOAD_CONCURRENCY": self.LOAD_CONCURRENCY,
            "MASKGAN_CHECKPOINT": self.CHECKPOINT_PATH,
            "MASKGAN_MAX_UPLOAD_BYTES": self.MAX_UPLOAD_BYTES,
            "MASKGAN_REQUESTS_PER_MINUTE": self.REQUESTS_PER_MINUTE,
        }

        for name, value in variables.items():
            if name in os.environ:
                logger.info(f"✅ {name}: LOADED ({value})")
            else:
                logger.info(f"   {name}: default ({value})")

        logger.info("================================")


def load_config_file(path: str) -> Dict[str, str]:
    """Read a key=value config file.

    Blank lines and lines starting with '#' are ignored. Keys are normalised to
    the underscore form of the matching CLI flag (``lambda-l1`` -> ``lambda_l1``).
    """
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigFileError(f"Cannot read config file {path}: {e}") from e

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().lstrip("-").replace("-", "_")
        if not key:
            raise ConfigFileError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()

    logger.info(f"Loaded {len(values)} values from config file {path}")
    return values


def resolve_seed(flag_value: Optional[int], file_values: Optional[Dict[str, str]] = None) -> int:
    """Seed precedence: flag > config file > MASKGAN_SEED > 0."""
    if flag_value is not None:
        return flag_value
    if file_values and "seed" in file_values:
        return int(file_values["seed"])
    return settings.DEFAULT_SEED


settings = Settings()

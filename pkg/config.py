# config.py
"""
Runtime configuration for the SFFormer toolkit.

Every value can be overridden through the environment (or a .env file next to
the working directory). Command-line flags take precedence over these defaults.

    SFF_CLUSTER_COUNT=953
    SFF_VOXEL_SPACING=1.0
    SFF_ASSESSMENT=SYNTH
    SFF_SEED=0
    SFF_THREADS=1
    SFF_RASTER_MODE=traversal     # traversal | points
    SFF_CYLINDER_DIAMETER=false
    SFF_SURFACE_FACES=false
    SFF_MAX_EPOCHS=1000
    SFF_PATIENCE=50
    SFF_BATCH_SIZE=8
    SFF_TRIALS=20
    SFF_LOG_LEVEL=INFO
    SFF_LOG_FILE=
"""
import logging
import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


# Atlas / geometry
CLUSTER_COUNT = int(os.getenv("SFF_CLUSTER_COUNT", "953"))
VOXEL_SPACING = float(os.getenv("SFF_VOXEL_SPACING", "1.0"))
RASTER_MODE = os.getenv("SFF_RASTER_MODE", "traversal").strip().lower()
CYLINDER_DIAMETER = _env_flag("SFF_CYLINDER_DIAMETER")
SURFACE_FACES = _env_flag("SFF_SURFACE_FACES")

# Targets
ASSESSMENT = os.getenv("SFF_ASSESSMENT", "SYNTH").strip()

# Training
SEED = int(os.getenv("SFF_SEED", "0"))
THREADS = int(os.getenv("SFF_THREADS", "1"))
MAX_EPOCHS = int(os.getenv("SFF_MAX_EPOCHS", "1000"))
PATIENCE = int(os.getenv("SFF_PATIENCE", "50"))
BATCH_SIZE = int(os.getenv("SFF_BATCH_SIZE", "8"))
TRIALS = int(os.getenv("SFF_TRIALS", "20"))
FOLDS = 3  # fixed by protocol

# Logging
LOG_LEVEL = os.getenv("SFF_LOG_LEVEL", "INFO").strip().upper()
LOG_FILE = os.getenv("SFF_LOG_FILE", "").strip()

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def configure_logging(level: str | None = None, log_file: str | None = None) -> None:
    """Set up root logging: stderr stream handler plus an optional UTF-8 file handler."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    log_file = LOG_FILE if log_file is None else log_file
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )

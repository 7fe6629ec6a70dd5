"""
SigTraj - Settings
Environment-driven configuration, logging setup, and config hashing
"""

import hashlib
import json
import logging
import os

from dotenv import load_dotenv

load_dotenv()

RUN_ROOT = os.getenv("SIGTRAJ_RUN_ROOT", "runs")
WORKERS = int(os.getenv("SIGTRAJ_WORKERS", "1"))
LOG_LEVEL = os.getenv("SIGTRAJ_LOG_LEVEL", "INFO")
DB_PATH = os.getenv("SIGTRAJ_DB", os.path.join(RUN_ROOT, "sigtraj.db"))

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class ConfigError(ValueError):
    """Invalid parameter value or unusable input configuration"""


def setup_logging(level=None):
    """Setup logging dengan format standar"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT
    )


def worker_count():
    """Jumlah worker thread untuk rollout (dibaca ulang dari environment)"""
    try:
        workers = int(os.getenv("SIGTRAJ_WORKERS", str(WORKERS)))
    except ValueError as e:
        raise ConfigError(f"SIGTRAJ_WORKERS must be an integer: {e}")
    if workers < 1:
        raise ConfigError(f"SIGTRAJ_WORKERS must be >= 1, got {workers}")
    return workers


def canonical_json(obj):
    """Canonical JSON: sorted keys, no whitespace"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    """Hash SHA-256 (12 hex) dari canonical JSON"""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


def file_checksum(filepath):
    """Hitung SHA-256 checksum file"""
    sha256 = hashlib.sha256()
    with open(filepath, 'rb') as f:
        while chunk := f.read(8192):
            sha256.update(chunk)
    return sha256.hexdigest()

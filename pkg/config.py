"""
Configuration Module for PVTN

Settings are read from the environment (a .env file is loaded first, see
create_env.py) and fall back to the defaults below.
"""

import os
from dotenv import load_dotenv

load_dotenv()


def _int(name: str, default: int) -> int:
    value = os.getenv(name)
    try:
        return int(value) if value not in (None, "") else default
    except ValueError:
        return default


SEED = _int("PVTN_SEED", 42)
PROVIDER = os.getenv("PVTN_PROVIDER", "mock")
MAX_TICKS = _int("PVTN_MAX_TICKS", 100_000)

LOG_FILE = os.getenv("PVTN_LOG_FILE", "pvtn.log")
LOG_LEVEL = os.getenv("PVTN_LOG_LEVEL", "INFO").upper()

HISTORY_DB = os.getenv("PVTN_HISTORY_DB", "pvtn_runs.db")
GOLDEN_DIR = os.getenv("PVTN_GOLDEN_DIR", "golden")
RUNS_DIR = os.getenv("PVTN_RUNS_DIR", "runs")
SCHEMA_FILE = os.getenv("PVTN_SCHEMA_FILE", os.path.join(os.path.dirname(os.path.abspath(__file__)), "schemas", "scenario.schema.json"))

# Protocol timing, in logical ticks
DECISION_SKEW = _int("PVTN_DECISION_SKEW", 8)
CERT_VALIDITY = _int("PVTN_CERT_VALIDITY", 100_000)
ACTION_TTL = _int("PVTN_ACTION_TTL", 200)
AGGREGATION_FACTOR = _int("PVTN_AGGREGATION_FACTOR", 4)

NONCE_CACHE = _int("PVTN_NONCE_CACHE", 4096)
OVERLAY_FANOUT = _int("PVTN_OVERLAY_FANOUT", 3)

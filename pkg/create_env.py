#!/usr/bin/env python3
"""
Script to create a .env file with the simulator settings
Run this script once to generate your .env file; empty answers keep the defaults
"""
import os

SETTINGS = [
    ("PVTN_SEED", "Default seed", "42"),
    ("PVTN_PROVIDER", "Crypto provider (mock/real)", "mock"),
    ("PVTN_MAX_TICKS", "Tick budget per run", "100000"),
    ("PVTN_LOG_FILE", "Log file", "pvtn.log"),
    ("PVTN_LOG_LEVEL", "Log level", "INFO"),
    ("PVTN_HISTORY_DB", "Run history database", "pvtn_runs.db"),
    ("PVTN_GOLDEN_DIR", "Golden trace directory", "golden"),
    ("PVTN_RUNS_DIR", "Trace and report output directory", "runs"),
]


def main():
    # Check if .env file already exists
    if os.path.exists('.env'):
        print("⚠️  .env file already exists. To recreate it, delete it first.")
        return

    print("📝 Enter the simulator settings (press Enter for the default):")
    values = {}
    for name, prompt, default in SETTINGS:
        answer = input(f"{prompt} [{default}]: ").strip()
        values[name] = answer or default

    with open('.env', 'w') as f:
        for name, value in values.items():
            f.write(f"{name}={value}\n")

    print("✅ .env file created successfully!")
    print("⚠️  Protocol timing (PVTN_DECISION_SKEW, PVTN_ACTION_TTL, ...) can be added by hand, see config.py")


if __name__ == "__main__":
    main()

"""
Database Module for PVTN

This module keeps the run history of the scenario runner:
- Initializing the database schema
- Recording one row per scenario run (seed, provider, exit code, trace digest)
- Listing recent runs and per-scenario statistics

The module uses SQLite through aiosqlite. Each run opens its own connection,
so several scenarios finishing concurrently can record themselves safely.
"""

import aiosqlite
import logging
from datetime import datetime

import config


class Database:
    """
    Run history store.

    Attributes:
        db_path (str): Path to the SQLite database file
    """

    def __init__(self, db_path: str = config.HISTORY_DB):
        self.db_path = db_path

    async def init(self):
        """Create the runs table and its index if they don't exist."""
        async with aiosqlite.connect(self.db_path) as db:
            await db.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    scenario TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    provider TEXT NOT NULL,
                    exit_code INTEGER NOT NULL,
                    trace_digest TEXT,
                    ticks INTEGER DEFAULT 0,
                    failures TEXT,
                    timestamp TEXT NOT NULL
                )
            ''')
            await db.execute("CREATE INDEX IF NOT EXISTS idx_runs_scenario ON runs (scenario)")
            await db.commit()
            logging.info("Database initialized")

    async def add_run(self, scenario, seed, provider, exit_code, trace_digest="", ticks=0, failures=""):
        """
        Record one scenario run.

        Args:
            scenario (str): scenario name
            seed (int): seed the run used
            provider (str): crypto provider name
            exit_code (int): 0 pass, 1 failed, 2 invalid scenario
            trace_digest (str, optional): SHA-256 of the rendered trace
            ticks (int, optional): logical ticks until quiescence
            failures (str, optional): failure messages joined by "; "

        Returns:
            bool: True if the row was written
        """
        try:
            async with aiosqlite.connect(self.db_path) as db:
                timestamp = datetime.now().isoformat()
                await db.execute(
                    "INSERT INTO runs (scenario, seed, provider, exit_code, trace_digest, ticks, failures, timestamp) "
                    "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (scenario, seed, provider, exit_code, trace_digest, ticks, failures, timestamp)
                )
                await db.commit()
            logging.info(f"Recorded run of {scenario}: exit {exit_code}")
            return True
        except aiosqlite.Error as e:
            logging.error(f"Failed to record run of {scenario}: {e}")
            return False

    async def get_history(self, limit=20, scenario=None):
        """
        Get the most recent runs, newest first.

        Args:
            limit (int, optional): maximum number of rows. Defaults to 20.
            scenario (str, optional): only runs of this scenario

        Returns:
            list: dictionaries with the run columns
        """
        query = "SELECT scenario, seed, provider, exit_code, trace_digest, ticks, failures, timestamp FROM runs"
        params = []
        if scenario:
            query += " WHERE scenario = ?"
            params.append(scenario)
        query += " ORDER BY id DESC LIMIT ?"
        params.append(limit)
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute(query, params) as cursor:
                return [dict(row) for row in await cursor.fetchall()]

    async def get_stats(self):
        """
        Per-scenario totals.

        Returns:
            list: dictionaries with scenario, runs, passed, failed, invalid,
            distinct trace digests and the last run time, most runs first
        """
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute('''
                SELECT scenario,
                       COUNT(*) AS runs,
                       SUM(CASE WHEN exit_code = 0 THEN 1 ELSE 0 END) AS passed,
                       SUM(CASE WHEN exit_code = 1 THEN 1 ELSE 0 END) AS failed,
                       SUM(CASE WHEN exit_code = 2 THEN 1 ELSE 0 END) AS invalid,
                       COUNT(DISTINCT trace_digest) AS digests,
                       MAX(timestamp) AS last_run
                FROM runs
                GROUP BY scenario
                ORDER BY runs DESC, scenario
            ''') as cursor:
                return [dict(row) for row in await cursor.fetchall()]

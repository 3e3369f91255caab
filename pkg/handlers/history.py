"""
History Handler Module for PVTN

This module handles run history and statistics requests, including:
- Listing the most recent scenario runs
- Showing per-scenario pass counts and trace stability
"""

import argparse
import logging
from typing import Optional

from database import Database
from utils.helpers import format_datetime, pluralize, separator, short_hex, status_mark


def register(subparsers) -> None:
    history = subparsers.add_parser("history", help="recent scenario runs")
    history.add_argument("--limit", type=int, default=20)
    history.add_argument("--scenario", help="only runs of this scenario")
    history.set_defaults(handler=show_history)

    stats = subparsers.add_parser("stats", help="per-scenario statistics")
    stats.set_defaults(handler=show_stats)


async def show_history(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    """
    Show the most recent runs

    Args:
        args: parsed command line (limit, scenario)
        db: Database instance (injected by main)
    """
    if db is None:
        db = Database()
    logging.info(f"History requested, limit {args.limit}")

    history = await db.get_history(args.limit, args.scenario)
    if not history:
        print("No runs recorded yet.")
        return 0

    print(separator("history"))
    for i, run in enumerate(history, 1):
        line = (f"{i}. {status_mark(run['exit_code'] == 0)} {run['scenario']} "
                f"seed {run['seed']} {run['provider']} exit {run['exit_code']} "
                f"{pluralize(run['ticks'], 'tick')} trace {short_hex(run['trace_digest'])} "
                f"- {format_datetime(run['timestamp'])}")
        print(line)
        if run["failures"]:
            print(f"     {run['failures']}")
    return 0


async def show_stats(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    """Show pass counts per scenario; more than one trace digest means the trace changed between runs"""
    if db is None:
        db = Database()
    logging.info("Statistics requested")

    stats = await db.get_stats()
    if not stats:
        print("No runs recorded yet.")
        return 0

    print(separator("stats"))
    for i, row in enumerate(stats, 1):
        rate = 100 * row["passed"] // row["runs"]
        print(f"{i}. {row['scenario']}: {pluralize(row['runs'], 'run')}, {row['passed']} passed, "
              f"{row['failed']} failed, {row['invalid']} invalid ({rate}%), "
              f"{pluralize(row['digests'], 'trace digest')}, last {format_datetime(row['last_run'])}")
    return 0

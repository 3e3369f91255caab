"""
PVTN - Private Virtual Tree Network simulator

This is the main entry point of the command-line runner. It configures
logging, parses the command line, initializes the run-history database and
dispatches to the command handlers.

Exit codes: 0 everything held, 1 an assertion, invariant or golden
comparison failed, 2 a scenario or input file could not be parsed.
"""

import argparse
import asyncio
import logging
import sys
from typing import Optional

from dotenv import load_dotenv

import config
from database import Database
from handlers import commands, history

# Load environment variables from .env file
load_dotenv()


def setup_logging(level: str = config.LOG_LEVEL, log_file: str = config.LOG_FILE) -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvtn", description="Private Virtual Tree Network simulator")
    parser.add_argument("--db", default=config.HISTORY_DB, help="run history database")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register command groups
    commands.register(subparsers)
    history.register(subparsers)
    return parser


async def main(argv: Optional[list] = None) -> int:
    """
    Parse the command line and run one command.

    Args:
        argv (list, optional): arguments without the program name

    Returns:
        int: process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0

    db = Database(args.db)
    await db.init()
    return await args.handler(args, db)


if __name__ == '__main__':
    setup_logging()
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        logging.info("Interrupted")
        sys.exit(1)
    except Exception as e:
        logging.error(f"Unexpected error: {type(e).__name__}: {e}")
        sys.exit(1)

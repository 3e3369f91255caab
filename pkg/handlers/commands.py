"""
Command Handlers Module for PVTN

This module contains the handlers for the simulation commands:
- run: run one or more scenario files (directories are expanded), in
  parallel with --jobs, and record every run in the history database
- dump-tree: print the tenant trees of a snapshot or scenario
- verify-chain: verify a delegation chain against a trust anchor
- isolation-check: cross-tenant isolation over a snapshot or a scenario

Every handler is a coroutine taking the parsed arguments and the Database,
and returns the process exit code.
"""

import argparse
import asyncio
import glob
import json
import logging
import os
from typing import Optional

import config
from database import Database
from pvtn.crypto import make_provider
from pvtn.errors import PvtnError
from pvtn.scenario import EXIT_FAILED, EXIT_INVALID, EXIT_OK, RunFlags, run_scenario
from pvtn.tenancy import check_isolation, check_snapshot_isolation
from pvtn.tree import DelegationCertificate, verify_chain
from utils.helpers import format_tree, pluralize, separator, status_mark

SCENARIO_SUFFIXES = (".yaml", ".yml")


def register(subparsers) -> None:
    """Add the simulation commands to the CLI."""
    run = subparsers.add_parser("run", help="run scenario files")
    run.add_argument("scenarios", nargs="+", help="scenario files or directories")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--provider", choices=["mock", "real"], default=config.PROVIDER)
    run.add_argument("--trace", dest="trace_path", help="trace output file (single scenario)")
    run.add_argument("--snapshot", dest="snapshot_path", help="snapshot output file (single scenario)")
    run.add_argument("--max-ticks", type=int, help="override the tick budget")
    run.add_argument("--bless", action="store_true", help="store passing traces as golden")
    run.add_argument("--golden-dir", default=config.GOLDEN_DIR)
    run.add_argument("--runs-dir", default=config.RUNS_DIR)
    run.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel")
    run.set_defaults(handler=handle_run)

    dump = subparsers.add_parser("dump-tree", help="print tenant trees")
    dump.add_argument("source", help="snapshot JSON or scenario file")
    dump.add_argument("--provider", choices=["mock", "real"], default=config.PROVIDER)
    dump.set_defaults(handler=handle_dump_tree)

    chain = subparsers.add_parser("verify-chain", help="verify a delegation chain")
    chain.add_argument("certs", help="JSON list of certificates, {\"chain\": [...]} or a snapshot")
    chain.add_argument("anchor", help="trust anchor public key, hex")
    chain.add_argument("--member", help="take the chain of this member from a snapshot")
    chain.add_argument("--now", type=int, help="tick to verify at")
    chain.add_argument("--provider", choices=["mock", "real"])
    chain.add_argument("--seed", type=int)
    chain.set_defaults(handler=handle_verify_chain)

    isolation = subparsers.add_parser("isolation-check", help="cross-tenant isolation check")
    isolation.add_argument("source", help="snapshot JSON or scenario file")
    isolation.add_argument("--provider", choices=["mock", "real"], default=config.PROVIDER)
    isolation.add_argument("--verbose", action="store_true", help="print every attempt")
    isolation.set_defaults(handler=handle_isolation_check)


def is_scenario(path: str) -> bool:
    return path.endswith(SCENARIO_SUFFIXES)


def collect_scenarios(paths: list) -> list:
    """Expand directories into their scenario files, recursively and sorted."""
    found = []
    for path in paths:
        if os.path.isdir(path):
            for suffix in SCENARIO_SUFFIXES:
                found.extend(glob.glob(os.path.join(path, "**", f"*{suffix}"), recursive=True))
        else:
            found.append(path)
    return sorted(dict.fromkeys(found))


async def _run_one(path: str, flags: RunFlags, semaphore: asyncio.Semaphore, db: Optional[Database]):
    async with semaphore:
        code, result = await asyncio.to_thread(run_scenario, path, flags)
    if db is not None:
        await db.add_run(result.name or path, result.seed, result.provider, code,
                         result.digest, result.ticks, "; ".join(result.failures))
    return code, result


async def run_many(paths: list, flags: RunFlags, jobs: int = 1, db: Optional[Database] = None) -> list:
    """
    Run scenarios concurrently, each in its own world.

    Args:
        paths (list): scenario files
        flags (RunFlags): overrides shared by every run
        jobs (int, optional): how many run at once. Defaults to 1.
        db (Database, optional): run history to record into

    Returns:
        list: (path, exit code, ScenarioResult or None) in input order
    """
    semaphore = asyncio.Semaphore(max(1, jobs))
    outcomes = await asyncio.gather(*(_run_one(p, flags, semaphore, db) for p in paths),
                                    return_exceptions=True)
    results = []
    for path, outcome in zip(paths, outcomes):
        if isinstance(outcome, BaseException):
            logging.error(f"Run of {path} crashed: {type(outcome).__name__}: {outcome}")
            results.append((path, EXIT_FAILED, None))
        else:
            code, result = outcome
            results.append((path, code, result))
    return results


async def handle_run(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    paths = collect_scenarios(args.scenarios)
    if not paths:
        logging.error("No scenario files found")
        return EXIT_INVALID
    if len(paths) > 1 and (args.trace_path or args.snapshot_path):
        logging.error("--trace and --snapshot take a single scenario")
        return EXIT_INVALID

    jobs = args.jobs
    if args.bless and jobs > 1:
        logging.info("--bless writes the golden index, running scenarios one at a time")
        jobs = 1
    flags = RunFlags(seed=args.seed, provider=args.provider, max_ticks=args.max_ticks,
                     trace_path=args.trace_path, snapshot_path=args.snapshot_path,
                     runs_dir=args.runs_dir, golden_dir=args.golden_dir, bless=args.bless)

    logging.info(f"Running {pluralize(len(paths), 'scenario')} with {jobs} job(s)")
    results = await run_many(paths, flags, jobs, db)

    for path, code, result in results:
        if result is None:
            print(f"{status_mark(False)} {path}: crashed, see the log")
        else:
            print(result.report())
    passed = sum(1 for _, code, _ in results if code == EXIT_OK)
    print(separator())
    print(f"{passed}/{len(results)} passed")
    return max(code for _, code, _ in results)


def load_json(path: str) -> Optional[dict]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logging.error(f"Cannot read {path}: {e}")
        return None


def load_snapshot(source: str, provider: str = config.PROVIDER) -> Optional[dict]:
    """A snapshot from a JSON file, or from running a scenario to quiescence."""
    if not is_scenario(source):
        return load_json(source)
    code, result = run_scenario(source, RunFlags(provider=provider, write_files=False))
    if code == EXIT_INVALID:
        return None
    return result.snapshot


async def handle_dump_tree(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    snapshot = load_snapshot(args.source, args.provider)
    if snapshot is None:
        return EXIT_INVALID
    print(f"seed {snapshot.get('seed')} provider {snapshot.get('provider')} tick {snapshot.get('tick')}")
    for tenant in snapshot.get("tenants", []):
        print(format_tree(tenant))
    for external in snapshot.get("externals", []):
        print(f"external {external['name']} {external['digest'][:12]}")
    bridges = snapshot.get("bridges", [])
    if bridges:
        print(f"{pluralize(len(bridges), 'bridge')}")
    return EXIT_OK


def _chain_source(data, member: Optional[str]) -> Optional[list]:
    if isinstance(data, list):
        return data
    if member:
        for tenant in data.get("tenants", []):
            for node in tenant["nodes"]:
                if node["name"] == member:
                    return node["chain"]
        logging.error(f"No member named {member} in the snapshot")
        return None
    return data.get("chain")


async def handle_verify_chain(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    """
    Verify a chain file.

    The file is a list of certificates in the snapshot's hex form, an object
    with a "chain" list (and optionally "now", "revoked", "seed",
    "provider"), or a whole snapshot together with --member.
    """
    data = load_json(args.certs)
    if data is None:
        return EXIT_INVALID
    raw = _chain_source(data, args.member)
    if raw is None:
        logging.error(f"{args.certs} holds no certificate chain")
        return EXIT_INVALID
    meta = data if isinstance(data, dict) else {}

    try:
        chain = [DelegationCertificate.from_json(c) for c in raw]
        anchor = bytes.fromhex(args.anchor)
        revoked = [bytes.fromhex(d) for d in meta.get("revoked", [])]
        provider = make_provider(args.provider or meta.get("provider", config.PROVIDER),
                                 args.seed if args.seed is not None else meta.get("seed", config.SEED))
    except (KeyError, TypeError, ValueError, PvtnError) as e:
        logging.error(f"Malformed chain input: {type(e).__name__}: {e}")
        return EXIT_INVALID

    now = args.now if args.now is not None else meta.get("now", meta.get("tick", 0))
    ok = verify_chain(provider, chain, anchor, now, revoked)
    for i, cert in enumerate(chain):
        print(f"{i}: {cert.role.value} {cert.scope} {cert.validity.to_wire()} subject {cert.subject_pk.hex()[:12]}")
    print(f"{status_mark(ok)} chain of {len(chain)} at tick {now}: {'valid' if ok else 'invalid'}")
    return EXIT_OK if ok else EXIT_FAILED


async def handle_isolation_check(args: argparse.Namespace, db: Optional[Database] = None) -> int:
    if is_scenario(args.source):
        code, result = run_scenario(args.source, RunFlags(provider=args.provider, write_files=False))
        if code == EXIT_INVALID or result.world is None:
            return EXIT_INVALID
        report = check_isolation(result.world)
    else:
        snapshot = load_json(args.source)
        if snapshot is None:
            return EXIT_INVALID
        try:
            report = check_snapshot_isolation(snapshot)
        except (KeyError, TypeError) as e:
            logging.error(f"{args.source} is not a snapshot: {e}")
            return EXIT_INVALID

    if args.verbose:
        print(report.render())
    else:
        for violation in report.violations:
            print(f"VIOLATION {violation.render()}")
    ok = not report.violations
    print(f"{status_mark(ok)} {pluralize(len(report.attempts), 'attempt')}, "
          f"{pluralize(len(report.violations), 'violation')}")
    return EXIT_OK if ok else EXIT_FAILED

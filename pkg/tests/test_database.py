import asyncio

import pytest

from database import Database


@pytest.fixture
def db(tmp_path):
    database = Database(str(tmp_path / "runs.db"))
    asyncio.run(database.init())
    return database


def test_init_is_idempotent(db):
    asyncio.run(db.init())
    assert asyncio.run(db.get_history()) == []


def test_add_run_and_history(db):
    assert asyncio.run(db.add_run("join-basic", 7, "mock", 0, "ab" * 32, 41))
    assert asyncio.run(db.add_run("sybil", 31, "mock", 1, "cd" * 32, 12, "rejects NotAuthorized: got 0"))

    history = asyncio.run(db.get_history())
    assert [run["scenario"] for run in history] == ["sybil", "join-basic"]
    assert history[0]["failures"] == "rejects NotAuthorized: got 0"
    assert history[1]["ticks"] == 41


def test_history_limit_and_filter(db):
    for code in (0, 0, 1):
        asyncio.run(db.add_run("replay", 5, "mock", code))
    asyncio.run(db.add_run("forgery", 5, "real", 0))

    assert len(asyncio.run(db.get_history(limit=2))) == 2
    only = asyncio.run(db.get_history(scenario="replay"))
    assert len(only) == 3
    assert [run["exit_code"] for run in only] == [1, 0, 0]


def test_stats(db):
    asyncio.run(db.add_run("replay", 5, "mock", 0, "aa"))
    asyncio.run(db.add_run("replay", 5, "mock", 0, "bb"))
    asyncio.run(db.add_run("replay", 5, "mock", 2))
    asyncio.run(db.add_run("forgery", 5, "mock", 1, "cc"))

    stats = {row["scenario"]: row for row in asyncio.run(db.get_stats())}
    assert stats["replay"]["runs"] == 3
    assert stats["replay"]["passed"] == 2
    assert stats["replay"]["invalid"] == 1
    assert stats["replay"]["digests"] == 3
    assert stats["forgery"]["failed"] == 1
    assert [row["scenario"] for row in asyncio.run(db.get_stats())] == ["replay", "forgery"]

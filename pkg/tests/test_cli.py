import asyncio
import json

import pytest

from main import main
from tests.conftest import scenario_path


def cli(tmp_path, *argv):
    return asyncio.run(main(["--db", str(tmp_path / "runs.db"), *argv]))


def run_args(tmp_path, *paths):
    return ["run", *paths, "--runs-dir", str(tmp_path / "runs"), "--golden-dir", str(tmp_path / "golden")]


class TestRun:
    def test_run_and_record(self, tmp_path, capsys):
        assert cli(tmp_path, *run_args(tmp_path, scenario_path("join-conflict.yaml"))) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "1/1 passed" in out
        assert (tmp_path / "runs" / "join-conflict.trace").exists()

        assert cli(tmp_path, "history") == 0
        assert "join-conflict seed" in capsys.readouterr().out
        assert cli(tmp_path, "stats") == 0
        assert "join-conflict: 1 run, 1 passed" in capsys.readouterr().out

    def test_parallel_directory_run(self, tmp_path, capsys):
        code = cli(tmp_path, *run_args(tmp_path, scenario_path("threats")), "--jobs", "4")
        assert code == 0
        assert "8/8 passed" in capsys.readouterr().out

    def test_invalid_scenario_exit_code(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("name: bad\n", encoding="utf-8")
        assert cli(tmp_path, *run_args(tmp_path, str(bad))) == 2

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli(tmp_path, *run_args(tmp_path, str(tmp_path / "empty"))) == 2

    def test_trace_needs_single_scenario(self, tmp_path):
        args = run_args(tmp_path, scenario_path("join-basic.yaml"), scenario_path("join-conflict.yaml"))
        assert cli(tmp_path, *args, "--trace", str(tmp_path / "t.trace")) == 2

    @pytest.mark.parametrize("argv", [[], ["run"], ["teleport"], ["run", "x.yaml", "--provider", "quantum"]])
    def test_bad_arguments(self, tmp_path, argv):
        assert cli(tmp_path, *argv) == 2


class TestInspection:
    def test_dump_tree(self, tmp_path, capsys):
        assert cli(tmp_path, "dump-tree", scenario_path("join-basic.yaml")) == 0
        out = capsys.readouterr().out
        assert "────── acme (hierarchical) ──────" in out
        assert "external carol" not in out

    def test_dump_tree_bad_source(self, tmp_path):
        assert cli(tmp_path, "dump-tree", str(tmp_path / "missing.json")) == 2

    def test_isolation_check(self, tmp_path, capsys):
        assert cli(tmp_path, "isolation-check", scenario_path("threats", "cross-tenant.yaml")) == 0
        assert "0 violations" in capsys.readouterr().out

    def test_verify_chain_from_snapshot(self, tmp_path, capsys):
        snapshot_file = tmp_path / "snap.json"
        args = run_args(tmp_path, scenario_path("join-basic.yaml"))
        assert cli(tmp_path, *args, "--snapshot", str(snapshot_file)) == 0
        snapshot = json.loads(snapshot_file.read_text(encoding="utf-8"))
        anchor = snapshot["tenants"][0]["root"]

        capsys.readouterr()
        assert cli(tmp_path, "verify-chain", str(snapshot_file), anchor, "--member", "carol") == 0
        assert "valid" in capsys.readouterr().out

        wrong = snapshot["tenants"][0]["nodes"][1]["public"]
        assert cli(tmp_path, "verify-chain", str(snapshot_file), wrong, "--member", "carol") == 1

    def test_verify_chain_unknown_member(self, tmp_path):
        snapshot_file = tmp_path / "snap.json"
        cli(tmp_path, *run_args(tmp_path, scenario_path("join-basic.yaml")), "--snapshot", str(snapshot_file))
        assert cli(tmp_path, "verify-chain", str(snapshot_file), "00", "--member", "nobody") == 2

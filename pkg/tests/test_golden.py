import glob
import json
import os

import pytest

from pvtn.scenario import EXIT_FAILED, EXIT_OK, RunFlags, run_scenario
from tests.conftest import ROOT_DIR, SCENARIO_DIR, scenario_path
from utils.golden import get_golden, get_golden_key, init_golden_directory, save_golden, trace_digest

BLESSED = sorted(glob.glob(os.path.join(SCENARIO_DIR, "**", "*.yaml"), recursive=True))
REPO_GOLDEN = os.path.join(ROOT_DIR, "golden")


class TestGoldenStore:
    def test_keys(self):
        assert get_golden_key("scenarios/threats/replay.yaml") == "replay"
        assert get_golden_key("scenarios/threats/replay.yaml", "real") == "replay.real"

    def test_unblessed_is_none(self, tmp_path):
        assert get_golden("nothing", str(tmp_path)) is None

    def test_save_and_read(self, tmp_path):
        text = "0 send a b JoinReq 00 -\n"
        assert save_golden("case", text, str(tmp_path))
        assert get_golden("case", str(tmp_path)) == text
        index = json.loads((tmp_path / "index.json").read_text(encoding="utf-8"))
        assert index["case"] == {"digest": trace_digest(text), "lines": 1}

    def test_init_keeps_existing_index(self, tmp_path):
        save_golden("case", "x\n", str(tmp_path))
        assert init_golden_directory(str(tmp_path))
        assert "case" in json.loads((tmp_path / "index.json").read_text(encoding="utf-8"))


class TestBlessFlow:
    def flags(self, tmp_path, **kwargs):
        return RunFlags(write_files=False, golden_dir=str(tmp_path), **kwargs)

    def test_bless_then_compare(self, tmp_path):
        path = scenario_path("join-conflict.yaml")
        code, result = run_scenario(path, self.flags(tmp_path, bless=True))
        assert code == EXIT_OK
        assert get_golden("join-conflict", str(tmp_path)) == result.trace

        code, again = run_scenario(path, self.flags(tmp_path))
        assert code == EXIT_OK
        assert ("golden", True, "identical") in again.checks

    def test_changed_trace_fails_with_diff(self, tmp_path):
        path = scenario_path("join-conflict.yaml")
        run_scenario(path, self.flags(tmp_path, bless=True))
        golden = tmp_path / "join-conflict.trace"
        golden.write_text(golden.read_text(encoding="utf-8") + "999 script x - - - extra\n", encoding="utf-8")

        code, result = run_scenario(path, self.flags(tmp_path))
        assert code == EXIT_FAILED
        assert result.diff
        assert any(line.startswith("-999") for line in result.diff)

    def test_failed_run_is_not_blessed(self, tmp_path):
        code, result = run_scenario(scenario_path("join-basic.yaml"), self.flags(tmp_path, bless=True, max_ticks=2))
        assert code == EXIT_FAILED
        assert get_golden("join-basic", str(tmp_path)) is None

    def test_providers_have_separate_goldens(self, tmp_path):
        path = scenario_path("join-conflict.yaml")
        run_scenario(path, self.flags(tmp_path, bless=True))
        code, result = run_scenario(path, self.flags(tmp_path, provider="real"))
        assert code == EXIT_OK
        assert ("golden", True, "join-conflict.real not blessed yet") in result.checks


@pytest.mark.parametrize("path", BLESSED, ids=lambda p: os.path.basename(p))
def test_matches_repository_golden(path):
    key = get_golden_key(path)
    if get_golden(key, REPO_GOLDEN) is None:
        pytest.skip(f"{key} has no blessed trace")
    code, result = run_scenario(path, RunFlags(write_files=False, golden_dir=REPO_GOLDEN))
    assert code == EXIT_OK, "\n".join(result.diff) or result.report()

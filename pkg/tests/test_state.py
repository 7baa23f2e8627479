"""Tests for gcm.state — run ids, run directories, manifests, the event log."""

import json
import subprocess
from pathlib import Path

import pytest

# ── _format_duration ───────────────────────────────────────────────────────────


class TestFormatDuration:
    def test_seconds(self) -> None:
        from gcm.state import _format_duration

        assert _format_duration(45.9) == "45s"

    def test_minutes(self) -> None:
        from gcm.state import _format_duration

        assert _format_duration(130) == "2m 10s"

    def test_hours(self) -> None:
        from gcm.state import _format_duration

        assert _format_duration(3720) == "1h 2m"

    def test_exact_hour(self) -> None:
        from gcm.state import _format_duration

        assert _format_duration(3600) == "1h"


# ── run_id / describe_version ──────────────────────────────────────────────────


class TestRunId:
    def test_format(self) -> None:
        from gcm.config import RunConfig, config_hash
        from gcm.state import run_id

        config = RunConfig()
        assert run_id("train", config, 3) == f"train-{config_hash(config)[:12]}-s3"

    def test_depends_on_config(self, config_file) -> None:
        from gcm.config import load_config
        from gcm.state import run_id

        a = load_config(config_file({"train": {"epochs": 1}}, "a.json"))
        b = load_config(config_file({"train": {"epochs": 2}}, "b.json"))
        assert run_id("train", a, 0) != run_id("train", b, 0)

    def test_depends_on_inputs(self) -> None:
        from gcm.config import RunConfig
        from gcm.state import run_id

        config = RunConfig()
        a = run_id("eval", config, 0, {"ckpt": "/runs/t/1.ckpt"})
        b = run_id("eval", config, 0, {"ckpt": "/runs/t/2.ckpt"})
        assert a != b
        assert a == run_id("eval", config, 0, {"ckpt": "/runs/t/1.ckpt"})
        assert a.startswith("eval-") and a.endswith("-s0")
        assert run_id("eval", config, 0, {}) == run_id("eval", config, 0)


class TestDescribeVersion:
    def test_falls_back_when_git_fails(self, monkeypatch: pytest.MonkeyPatch) -> None:
        import gcm.state as state

        def fail(*args, **kwargs):
            return subprocess.CompletedProcess(args, 128, stdout="", stderr="not a repo")

        monkeypatch.setattr(state.subprocess, "run", fail)
        assert state.describe_version() == f"v{state.PACKAGE_VERSION}"

    def test_falls_back_without_git(self, monkeypatch: pytest.MonkeyPatch) -> None:
        import gcm.state as state

        def missing(*args, **kwargs):
            raise FileNotFoundError("git")

        monkeypatch.setattr(state.subprocess, "run", missing)
        assert state.describe_version() == "v0.1.0"

    def test_uses_describe_output(self, monkeypatch: pytest.MonkeyPatch) -> None:
        import gcm.state as state

        def ok(*args, **kwargs):
            return subprocess.CompletedProcess(args, 0, stdout="v0.3.1-2-gabc1234\n", stderr="")

        monkeypatch.setattr(state.subprocess, "run", ok)
        assert state.describe_version() == "v0.3.1-2-gabc1234"


# ── RunDir ─────────────────────────────────────────────────────────────────────


class TestRunDir:
    def _run(self, tmp_path: Path):
        from gcm.config import RunConfig
        from gcm.state import RunDir

        return RunDir(tmp_path, "eval", RunConfig(), 0).open()

    def test_open_writes_config_and_unfinished_manifest(self, tmp_path: Path) -> None:
        from gcm.state import read_run_manifest

        run = self._run(tmp_path)
        assert run.path.parent == tmp_path
        config = json.loads((run.path / "config.json").read_text(encoding="utf-8"))
        assert set(config) == {"model", "train", "data"}
        manifest = read_run_manifest(run.path)
        assert manifest["finished_at"] is None
        assert manifest["run_id"] == run.run_id

    def test_finish_adds_fields(self, tmp_path: Path) -> None:
        from gcm.state import read_run_manifest

        run = self._run(tmp_path)
        run.finish(mAP=0.5)
        manifest = read_run_manifest(run.path)
        assert manifest["finished_at"] is not None
        assert manifest["mAP"] == 0.5
        assert manifest["duration"].endswith(("s", "m", "h"))

    def test_paths(self, tmp_path: Path) -> None:
        from gcm.state import checkpoint_path

        run = self._run(tmp_path)
        assert checkpoint_path(run.path, 3) == run.path / "3.ckpt"
        assert run.bank_path.name == "bank.bin"

    def test_manifest_records_inputs(self, tmp_path: Path) -> None:
        from gcm.config import RunConfig
        from gcm.state import RunDir, read_run_manifest

        inputs = {"data": "/data/synth", "clip": "v0000_0001"}
        run = RunDir(tmp_path, "parse", RunConfig(), 0, inputs).open()
        assert read_run_manifest(run.path)["inputs"] == inputs
        other = RunDir(tmp_path, "parse", RunConfig(), 0, inputs | {"clip": "v0000_0002"})
        assert other.path != run.path

    def test_reopen_starts_a_fresh_log(self, tmp_path: Path) -> None:
        run = self._run(tmp_path)
        run.log.append("epoch", epoch=1)
        again = self._run(tmp_path)
        assert again.path == run.path
        assert again.log.read() == []

    def test_write_json(self, tmp_path: Path) -> None:
        run = self._run(tmp_path)
        path = run.write_json("report.json", {"mAP": 1.0})
        assert json.loads(path.read_text(encoding="utf-8")) == {"mAP": 1.0}


# ── EventLog ───────────────────────────────────────────────────────────────────


class TestEventLog:
    def test_append_and_read(self, tmp_path: Path) -> None:
        from gcm.state import EventLog

        log = EventLog(tmp_path / "sub" / "log.jsonl")
        assert log.read() == []
        assert log.append("step", step=1, loss=0.5) == {"event": "step", "step": 1, "loss": 0.5}
        log.append("epoch", epoch=1)
        assert [e["event"] for e in log.read()] == ["step", "epoch"]

    def test_one_line_per_event(self, tmp_path: Path) -> None:
        from concurrent.futures import ThreadPoolExecutor

        from gcm.state import EventLog

        log = EventLog(tmp_path / "log.jsonl")
        with ThreadPoolExecutor(max_workers=4) as pool:
            list(pool.map(lambda i: log.append("step", step=i), range(50)))
        assert sorted(e["step"] for e in log.read()) == list(range(50))

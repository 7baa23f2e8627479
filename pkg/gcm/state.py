"""state.py — Run directories: run ids, manifests, effective config, JSONL event log, checkpoint paths."""

import hashlib
import json
import subprocess
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

from gcm.config import REPO_ROOT, RunConfig, config_hash

PACKAGE_VERSION = "0.1.0"

RUN_MANIFEST = "manifest.json"
EFFECTIVE_CONFIG = "config.json"
EVENT_LOG = "log.jsonl"
BANK_FILE = "bank.bin"
REPORT_FILE = "report.json"


# ── Formatting ─────────────────────────────────────────────────────────────────


def _format_duration(seconds: float) -> str:
    """Format *seconds* as a compact string (e.g. ``2m 10s``, ``1h 2m``)."""
    s = int(seconds)
    if s < 60:
        return f"{s}s"
    if s < 3600:
        m, sec = divmod(s, 60)
        return f"{m}m {sec}s" if sec else f"{m}m"
    h, rem = divmod(s, 3600)
    m = rem // 60
    return f"{h}h {m}m" if m else f"{h}h"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ── Identity ───────────────────────────────────────────────────────────────────


def run_id(command: str, config: RunConfig, seed: int, inputs: dict | None = None) -> str:
    """``{command}-{identity hash[:12]}-s{seed}``; same inputs, same directory.

    The identity is the config hash alone, or, when *inputs* (dataset,
    checkpoint, clip, ...) are given, a hash over the config hash and them.
    """
    digest = config_hash(config)
    if inputs:
        canon = json.dumps({"config": digest, "inputs": inputs}, sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()
    return f"{command}-{digest[:12]}-s{seed}"


def checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / f"{epoch}.ckpt"


def describe_version(repo: Path = REPO_ROOT) -> str:
    """``git describe --tags --always --dirty`` for *repo*, else ``v{package version}``."""
    try:
        result = subprocess.run(
            ["git", "-C", str(repo), "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            encoding="utf-8",
            errors="replace",
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{PACKAGE_VERSION}"
    out = result.stdout.strip()
    if result.returncode != 0 or not out:
        return f"v{PACKAGE_VERSION}"
    return out


# ── Run directory ──────────────────────────────────────────────────────────────


class RunDir:
    """One command's output directory under ``--out``.

    Created on entry with the effective config; :meth:`finish` writes the
    manifest (a run that crashed leaves ``finished_at`` unset).  Re-opening
    the same identity starts a fresh event log.
    """

    def __init__(
        self, out: Path, command: str, config: RunConfig, seed: int, inputs: dict | None = None
    ) -> None:
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = dict(inputs or {})
        self.run_id = run_id(command, config, seed, self.inputs)
        self.path = out / self.run_id
        self.started_at = _now()
        self._t0 = time.monotonic()

    def open(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / EVENT_LOG).unlink(missing_ok=True)
        (self.path / EFFECTIVE_CONFIG).write_text(
            json.dumps(self.config.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        self._write_manifest(finished=False)
        return self

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self._t0

    @property
    def bank_path(self) -> Path:
        return self.path / BANK_FILE

    @property
    def log(self) -> "EventLog":
        return EventLog(self.path / EVENT_LOG)

    def manifest(self, finished: bool = True, extra: dict | None = None) -> dict:
        data = {
            "command": self.command,
            "run_id": self.run_id,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "inputs": self.inputs,
            "version": describe_version(),
            "started_at": self.started_at,
            "finished_at": _now() if finished else None,
            "duration": _format_duration(self.elapsed) if finished else None,
        }
        if extra:
            data.update(extra)
        return data

    def _write_manifest(self, finished: bool, extra: dict | None = None) -> None:
        (self.path / RUN_MANIFEST).write_text(
            json.dumps(self.manifest(finished, extra), indent=2), encoding="utf-8"
        )

    def finish(self, **extra) -> None:
        """Stamp the manifest with the finish time and any extra fields."""
        self._write_manifest(finished=True, extra=extra or None)

    def write_json(self, name: str, data: dict) -> Path:
        path = self.path / name
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path


def read_run_manifest(path: Path) -> dict:
    """Load the manifest of a run directory."""
    return json.loads((path / RUN_MANIFEST).read_text(encoding="utf-8"))


# ── Event log ──────────────────────────────────────────────────────────────────


class EventLog:
    """Append-only JSONL log; one object per line."""

    _lock = threading.Lock()

    def __init__(self, path: Path) -> None:
        self.path = path

    def append(self, event: str, **fields) -> dict:
        record = {"event": event, **fields}
        line = json.dumps(record)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return record

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [
            json.loads(line)
            for line in self.path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

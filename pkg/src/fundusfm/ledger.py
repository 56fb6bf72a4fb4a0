"""Append-only run ledger shared by every CLI process.

One JSON record per line; a run appends a ``running`` record when it starts
and a ``completed``/``failed`` record when it ends, so the latest record per
config hash gives the run's current state. Concurrent writers (parallel grid
cells) are serialized by a sidecar file lock; records are never rewritten.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock

from .errors import ConfigError

STATUSES = ("running", "completed", "failed", "skipped")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunLedger:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, record: dict) -> dict:
        """Append one record (adds a ``logged_at`` timestamp) and return it."""
        if "config_hash" not in record:
            raise ConfigError("ledger record needs a config_hash")
        if record.get("status") not in STATUSES:
            raise ConfigError(f"ledger record status must be one of {STATUSES}")
        record = dict(record, logged_at=utc_now())
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        return record

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self._lock:
            text = self.path.read_text()
        records = []
        for pos, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"ledger line {pos + 1} is not valid JSON: "
                                  f"{exc}") from exc
        return records

    def latest(self, config_hash: str) -> dict | None:
        """Most recent record for one config hash, or None."""
        found = None
        for record in self.records():
            if record["config_hash"] == config_hash:
                found = record
        return found

    def is_completed(self, config_hash: str) -> bool:
        latest = self.latest(config_hash)
        return bool(latest) and latest["status"] == "completed"

    def completed_runs(self, where: dict | None = None) -> list[dict]:
        """Latest-per-hash completed records matching ``where``.

        Filter keys check the record itself first, then its embedded
        ``config`` mapping; records missing a filtered key never match.
        """
        latest: dict[str, dict] = {}
        for record in self.records():
            latest[record["config_hash"]] = record
        out = []
        for record in latest.values():
            if record["status"] != "completed":
                continue
            if _matches(record, where or {}):
                out.append(record)
        out.sort(key=lambda r: r["config_hash"])
        return out


def _matches(record: dict, where: dict) -> bool:
    config = record.get("config") or {}
    for key, wanted in where.items():
        if key in record:
            actual = record[key]
        elif key in config:
            actual = config[key]
        else:
            return False
        if actual != wanted:
            return False
    return True

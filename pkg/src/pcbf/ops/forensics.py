"""Rolling metric buffer dumped to disk when a run halts."""

from __future__ import annotations

import json
import os
from collections import deque
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from ..errors import NonMonotonicStep
from .atomic import atomic_write
from .watchdog import WatchdogEvent

DEFAULT_CAPACITY = 256


class ForensicsBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[dict[str, Any]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, step: int, metrics: Mapping[str, float]) -> None:
        if self._entries and step < self._entries[-1]["step"]:
            raise NonMonotonicStep(f"step {step} after step {self._entries[-1]['step']}")
        ts = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")
        self._entries.append({"step": int(step), "ts": ts, "metrics": dict(metrics)})

    def entries(self) -> list[dict[str, Any]]:
        return [dict(e) for e in self._entries]

    def dump(self, directory: str | os.PathLike, trigger: WatchdogEvent | None = None) -> Path:
        """Write ``forensics_<UTC basic ISO>_<step>.json`` atomically and return its path."""
        now = datetime.now(timezone.utc)
        step = trigger.step if trigger is not None else (self._entries[-1]["step"] if self._entries else 0)
        name = f"forensics_{now.strftime('%Y%m%dT%H%M%S.%fZ')}_{step}.json"
        payload = {
            "capacity": self.capacity,
            "dumped_at": now.strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
            "trigger": None if trigger is None else trigger.to_dict(),
            "entries": self.entries(),
        }
        path = Path(directory) / name
        atomic_write(path, json.dumps(payload, indent=2).encode("utf-8") + b"\n")
        return path


def load_dump(path: str | os.PathLike) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))

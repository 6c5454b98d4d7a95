"""Metric watchdogs with run-length triggers and a latching halt."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Mapping

from ..errors import NonMonotonicStep
from .prereg import NEGATION, Commitment, PreRegistration, compare, normalize_comparator


@dataclass(frozen=True)
class Watchdog:
    name: str
    metric: str
    comparator: str
    threshold: float
    consecutive_required: int = 1
    halt: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "comparator", normalize_comparator(self.comparator))
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.consecutive_required < 1:
            raise ValueError("consecutive_required must be >= 1")


@dataclass(frozen=True)
class WatchdogEvent:
    watchdog_name: str
    metric: str
    step: int
    observed: float
    threshold: float
    comparator: str
    is_halt: bool
    commitment_sha256: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "watchdog_name": self.watchdog_name, "metric": self.metric, "step": self.step,
            "observed": self.observed, "threshold": self.threshold, "comparator": self.comparator,
            "is_halt": self.is_halt, "commitment_sha256": self.commitment_sha256,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WatchdogEvent":
        return cls(**data)


class WatchdogRegistry:
    """Holds watchdogs and evaluates them against streamed metrics.

    A watchdog fires on every update where its condition has held for at
    least ``consecutive_required`` consecutive updates. An update that lacks
    the watchdog's metric leaves its run-length untouched. The first halt
    event latches: :meth:`should_halt` returns it from then on.
    """

    def __init__(self, watchdogs: list[Watchdog] | None = None, commitment_sha256: str | None = None):
        self.commitment_sha256 = commitment_sha256
        self._watchdogs: dict[str, Watchdog] = {}
        self._runs: dict[str, int] = {}
        self._last_step: int | None = None
        self._halt: WatchdogEvent | None = None
        self.events: list[WatchdogEvent] = []
        for w in watchdogs or []:
            self.add(w)

    def add(self, watchdog: Watchdog) -> None:
        if watchdog.name in self._watchdogs:
            raise ValueError(f"duplicate watchdog {watchdog.name!r}")
        self._watchdogs[watchdog.name] = watchdog
        self._runs[watchdog.name] = 0

    def __len__(self) -> int:
        return len(self._watchdogs)

    @property
    def watchdogs(self) -> list[Watchdog]:
        return list(self._watchdogs.values())

    def update(self, metrics: Mapping[str, float], step: int) -> list[WatchdogEvent]:
        if self._last_step is not None and step < self._last_step:
            raise NonMonotonicStep(f"step {step} after step {self._last_step}")
        self._last_step = step
        fired = []
        for w in self._watchdogs.values():
            if w.metric not in metrics:
                continue
            observed = float(metrics[w.metric])
            if compare(observed, w.comparator, w.threshold):
                self._runs[w.name] += 1
            else:
                self._runs[w.name] = 0
            if self._runs[w.name] >= w.consecutive_required:
                event = WatchdogEvent(w.name, w.metric, step, observed, w.threshold, w.comparator,
                                      w.halt, self.commitment_sha256)
                fired.append(event)
                if w.halt and self._halt is None:
                    self._halt = event
        self.events.extend(fired)
        return fired

    def should_halt(self) -> WatchdogEvent | None:
        return self._halt

    def snapshot(self) -> dict[str, Any]:
        """Copy of the mutable state, safe to hand to a reporting thread."""
        return {
            "commitment_sha256": self.commitment_sha256,
            "last_step": self._last_step,
            "runs": dict(self._runs),
            "halt": None if self._halt is None else self._halt.to_dict(),
            "events": [e.to_dict() for e in copy.copy(self.events)],
        }


def watchdogs_from_preregistration(
    prereg: PreRegistration, commitment: Commitment | None = None
) -> WatchdogRegistry:
    """One halting watchdog per criterion, firing when the criterion is violated."""
    sha = commitment.sha256 if commitment is not None else prereg.sha256()
    registry = WatchdogRegistry(commitment_sha256=sha)
    for c in prereg.criteria:
        registry.add(Watchdog(
            name=f"prereg:{c.metric}",
            metric=c.metric,
            comparator=NEGATION[c.comparator],
            threshold=c.threshold,
            halt=True,
        ))
    return registry

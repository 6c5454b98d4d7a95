"""Pre-registered campaign specifications and their tamper-evident commitments."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from ..env import SceneType
from ..errors import InvalidPreRegistration, TamperDetected
from .atomic import atomic_write
from .hashing import canonical_json_bytes, sha256_bytes, sha256_file

COMPARATORS = (">=", "<=", ">", "<")
_COMPARATOR_ALIASES = {"≥": ">=", "≤": "<=", "ge": ">=", "le": "<=", "gt": ">", "lt": "<"}
NEGATION = {">=": "<", "<=": ">", ">": "<=", "<": ">="}

DISTRIBUTION_TOL = 1e-9


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def normalize_comparator(op: str) -> str:
    op = _COMPARATOR_ALIASES.get(op, op)
    if op not in COMPARATORS:
        raise InvalidPreRegistration(f"unknown comparator {op!r}")
    return op


def compare(observed: float, op: str, threshold: float) -> bool:
    if op == ">=":
        return observed >= threshold
    if op == "<=":
        return observed <= threshold
    if op == ">":
        return observed > threshold
    if op == "<":
        return observed < threshold
    raise ValueError(f"unknown comparator {op!r}")


def _scene_map(raw: Mapping[str, Any], what: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for key, value in raw.items():
        try:
            scene = SceneType.parse(key).value
        except ValueError as exc:
            raise InvalidPreRegistration(f"{what}: {exc}") from None
        if scene in out:
            raise InvalidPreRegistration(f"{what}: duplicate scene {scene}")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise InvalidPreRegistration(f"{what}[{key}] must be a finite number")
        if not 0.0 <= value <= 1.0:
            raise InvalidPreRegistration(f"{what}[{key}] must lie in [0, 1]")
        out[scene] = float(value)
    return out


@dataclass(frozen=True)
class Criterion:
    metric: str
    comparator: str
    threshold: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "comparator", normalize_comparator(self.comparator))
        if isinstance(self.threshold, bool) or not isinstance(self.threshold, (int, float)):
            raise InvalidPreRegistration(f"threshold for {self.metric} must be a number")
        object.__setattr__(self, "threshold", float(self.threshold))
        if not math.isfinite(self.threshold):
            raise InvalidPreRegistration(f"threshold for {self.metric} must be finite")
        if not isinstance(self.metric, str) or not self.metric:
            raise InvalidPreRegistration("criterion metric must be a non-empty string")

    def holds(self, observed: float) -> bool:
        return compare(observed, self.comparator, self.threshold)

    def to_dict(self) -> dict[str, Any]:
        return {"metric": self.metric, "comparator": self.comparator, "threshold": self.threshold}


@dataclass(frozen=True)
class Commitment:
    sha256: str
    artifact_path: str

    def verify(self) -> bool:
        return sha256_file(self.artifact_path) == self.sha256


@dataclass(frozen=True)
class PreRegistration:
    name: str
    criteria: tuple[Criterion, ...] = ()
    attempt_distribution: Mapping[str, float] = field(default_factory=dict)
    predicted_yields: Mapping[str, float] = field(default_factory=dict)
    notes: str = ""
    created_at: str = field(default_factory=utc_now)

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise InvalidPreRegistration("name must be a non-empty string")
        crit = tuple(c if isinstance(c, Criterion) else Criterion(**c) for c in self.criteria)
        metrics = [c.metric for c in crit]
        if len(set(metrics)) != len(metrics):
            raise InvalidPreRegistration("criteria metrics must be unique")
        object.__setattr__(self, "criteria", crit)
        dist = _scene_map(self.attempt_distribution, "attempt_distribution")
        if dist and abs(sum(dist.values()) - 1.0) > DISTRIBUTION_TOL:
            raise InvalidPreRegistration(f"attempt_distribution sums to {sum(dist.values())!r}, not 1")
        object.__setattr__(self, "attempt_distribution", dist)
        object.__setattr__(self, "predicted_yields", _scene_map(self.predicted_yields, "predicted_yields"))

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "created_at": self.created_at,
            "criteria": [c.to_dict() for c in sorted(self.criteria, key=lambda c: c.metric)],
            "attempt_distribution": dict(self.attempt_distribution),
            "predicted_yields": dict(self.predicted_yields),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PreRegistration":
        if not isinstance(data, Mapping):
            raise InvalidPreRegistration("pre-registration must be a JSON object")
        allowed = {"name", "created_at", "criteria", "attempt_distribution", "predicted_yields", "notes"}
        unknown = set(data) - allowed
        if unknown:
            raise InvalidPreRegistration(f"unknown keys: {sorted(unknown)}")
        if "name" not in data:
            raise InvalidPreRegistration("missing key: name")
        try:
            criteria = tuple(Criterion(**c) for c in data.get("criteria", []))
        except TypeError as exc:
            raise InvalidPreRegistration(f"bad criterion: {exc}") from None
        kwargs: dict[str, Any] = dict(
            name=data["name"],
            criteria=criteria,
            attempt_distribution=data.get("attempt_distribution", {}),
            predicted_yields=data.get("predicted_yields", {}),
            notes=data.get("notes", ""),
        )
        if "created_at" in data:
            kwargs["created_at"] = data["created_at"]
        return cls(**kwargs)

    def canonical_bytes(self) -> bytes:
        return canonical_json_bytes(self.to_dict())

    def sha256(self) -> str:
        return sha256_bytes(self.canonical_bytes())

    # -- commitment and evaluation ------------------------------------------
    def commit_to_artifact(self, path: str | os.PathLike) -> Commitment:
        return commit_to_artifact(self, path)

    def evaluate(self, metrics: Mapping[str, float]) -> "EvaluationReport":
        return evaluate(self, metrics)


def commit_to_artifact(prereg: PreRegistration, path: str | os.PathLike) -> Commitment:
    """Atomically write the canonical form and return the hash of those bytes."""
    data = prereg.canonical_bytes()
    atomic_write(path, data)
    return Commitment(sha256_bytes(data), str(path))


def load_preregistration(path: str | os.PathLike) -> PreRegistration:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidPreRegistration(f"cannot parse {path}: {exc}") from exc
    return PreRegistration.from_dict(raw)


def manifest_path_for(artifact: str | os.PathLike) -> Path:
    return Path(f"{artifact}.manifest.json")


def write_run_manifest(commitment: Commitment, manifest_path: str | os.PathLike | None = None) -> Path:
    path = Path(manifest_path) if manifest_path else manifest_path_for(commitment.artifact_path)
    payload = {"artifact": str(commitment.artifact_path), "sha256": commitment.sha256, "committed_at": utc_now()}
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True).encode("utf-8") + b"\n")
    return path


def verify_artifact(artifact: str | os.PathLike, manifest_path: str | os.PathLike | None = None) -> Commitment:
    """Recompute the artifact hash and compare it with the recorded manifest."""
    path = Path(manifest_path) if manifest_path else manifest_path_for(artifact)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        recorded = manifest["sha256"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TamperDetected(f"no usable manifest at {path}: {exc}") from exc
    actual = sha256_file(artifact)
    if actual != recorded:
        raise TamperDetected(f"{artifact}: sha256 {actual} does not match committed {recorded}")
    return Commitment(actual, str(artifact))


@dataclass(frozen=True)
class CriterionResult:
    metric: str
    comparator: str
    threshold: float
    observed: float | None
    status: str  # "pass" | "fail" | "not_evaluated"

    def to_dict(self) -> dict[str, Any]:
        return {"metric": self.metric, "comparator": self.comparator, "threshold": self.threshold,
                "observed": self.observed, "status": self.status}


@dataclass(frozen=True)
class EvaluationReport:
    overall: str
    results: tuple[CriterionResult, ...]
    prereg_sha256: str

    @property
    def passed(self) -> bool:
        return self.overall == "pass"

    def to_dict(self) -> dict[str, Any]:
        return {"overall": self.overall, "prereg_sha256": self.prereg_sha256,
                "results": [r.to_dict() for r in self.results]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvaluationReport":
        return cls(data["overall"], tuple(CriterionResult(**r) for r in data["results"]), data["prereg_sha256"])


def evaluate(prereg: PreRegistration, metrics: Mapping[str, float]) -> EvaluationReport:
    """Check each criterion; a criterion with no observed metric never passes."""
    results = []
    for c in prereg.criteria:
        observed = metrics.get(c.metric)
        if observed is None:
            status = "not_evaluated"
        else:
            observed = float(observed)
            status = "pass" if c.holds(observed) else "fail"
        results.append(CriterionResult(c.metric, c.comparator, c.threshold, observed, status))
    overall = "pass" if all(r.status == "pass" for r in results) else "fail"
    return EvaluationReport(overall, tuple(results), prereg.sha256())

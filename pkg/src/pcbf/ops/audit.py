"""Episode dataset format (JSON lines) and the four-check dataset audit."""

from __future__ import annotations

import json
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Any, Iterator, Mapping

from ..env import SceneType
from ..errors import MalformedDataset
from .atomic import atomic_writer
from .hashing import sha256_file

DATASET_FORMAT = "pcbf-episodes"
DATASET_VERSION = 1

_STEP_KEYS = {"t", "obs", "nominal", "safe", "modified", "h_hard", "h_soft"}
_RECORD_KEYS = {"scene_type", "seed", "termination_reason", "length", "steps"}


class DatasetWriter:
    def __init__(self, fh):
        self._fh = fh
        self.count = 0

    def write(self, record: Mapping[str, Any]) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")).encode("utf-8") + b"\n")
        self.count += 1


@contextmanager
def open_dataset(path: str | os.PathLike, v_max: float, chunk_length: int) -> Iterator[DatasetWriter]:
    """Stream records into ``path``; the file appears atomically when the block exits."""
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "v_max": float(v_max),
              "chunk_length": int(chunk_length)}
    with atomic_writer(path) as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        yield DatasetWriter(fh)


def _vec2(value: Any) -> bool:
    return (isinstance(value, list) and len(value) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value))


def read_dataset(path: str | os.PathLike) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Parse and schema-check a dataset; raises ``MalformedDataset`` with the line number."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise MalformedDataset(f"cannot open {path}: {exc}") from exc
    records: list[dict[str, Any]] = []
    header: dict[str, Any] | None = None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise MalformedDataset("blank line", lineno)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedDataset(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise MalformedDataset("expected a JSON object", lineno)
            if header is None:
                if obj.get("format") != DATASET_FORMAT or obj.get("version") != DATASET_VERSION:
                    raise MalformedDataset("bad header format/version", lineno)
                if not isinstance(obj.get("v_max"), (int, float)) or not isinstance(obj.get("chunk_length"), int):
                    raise MalformedDataset("header needs numeric v_max and integer chunk_length", lineno)
                header = obj
                continue
            _check_record(obj, lineno)
            records.append(obj)
    if header is None:
        raise MalformedDataset("empty file, missing header", 1)
    return header, records


def _check_record(rec: dict[str, Any], lineno: int) -> None:
    missing = _RECORD_KEYS - set(rec)
    if missing:
        raise MalformedDataset(f"record missing keys {sorted(missing)}", lineno)
    try:
        SceneType.parse(rec["scene_type"])
    except (ValueError, TypeError):
        raise MalformedDataset(f"unknown scene_type {rec['scene_type']!r}", lineno) from None
    if not isinstance(rec["length"], int) or not isinstance(rec["steps"], list):
        raise MalformedDataset("length must be an integer and steps a list", lineno)
    for step in rec["steps"]:
        if not isinstance(step, dict) or _STEP_KEYS - set(step):
            raise MalformedDataset("step record missing keys", lineno)
        if not (_vec2(step["nominal"]) and _vec2(step["safe"])):
            raise MalformedDataset("actions must be 2-vectors of numbers", lineno)


@dataclass(frozen=True)
class AuditSpec:
    """Audit settings; ``v_max`` and ``chunk_length`` default to the dataset header."""

    target_distribution: Mapping[str, float] = field(default_factory=dict)
    tolerance_pp: float = 2.0
    v_max: float | None = None
    chunk_length: int | None = None
    mad_k: float = 5.0
    max_outlier_fraction: float = 0.01

    def __post_init__(self) -> None:
        target = {SceneType.parse(k).value: float(v) for k, v in self.target_distribution.items()}
        object.__setattr__(self, "target_distribution", target)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AuditSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown audit spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return {"target_distribution": dict(self.target_distribution), "tolerance_pp": self.tolerance_pp,
                "v_max": self.v_max, "chunk_length": self.chunk_length, "mad_k": self.mad_k,
                "max_outlier_fraction": self.max_outlier_fraction}


@dataclass(frozen=True)
class AuditCheck:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "status": "pass" if self.passed else "fail", "detail": self.detail}


@dataclass(frozen=True)
class AuditReport:
    checks: tuple[AuditCheck, ...]
    dataset_sha256: str

    @property
    def overall(self) -> str:
        return "pass" if all(c.passed for c in self.checks) else "fail"

    @property
    def passed(self) -> bool:
        return self.overall == "pass"

    def check(self, name: str) -> AuditCheck:
        return next(c for c in self.checks if c.name == name)

    def to_dict(self) -> dict[str, Any]:
        return {"overall": self.overall, "dataset_sha256": self.dataset_sha256,
                "checks": [c.to_dict() for c in self.checks]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AuditReport":
        checks = tuple(AuditCheck(c["name"], c["status"] == "pass", c["detail"]) for c in data["checks"])
        report = cls(checks, data["dataset_sha256"])
        if report.overall != data["overall"]:
            raise ValueError("overall verdict inconsistent with checks")
        return report

    def format(self) -> str:
        lines = [f"dataset audit: {self.overall.upper()}  sha256={self.dataset_sha256}"]
        for c in self.checks:
            lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _scene_distribution(records: list[dict[str, Any]], spec: AuditSpec) -> AuditCheck:
    if not records:
        return AuditCheck("scene_distribution", False, "dataset has no episodes")
    if not spec.target_distribution:
        return AuditCheck("scene_distribution", False, "no target distribution configured")
    counts: dict[str, int] = {}
    for rec in records:
        key = SceneType.parse(rec["scene_type"]).value
        counts[key] = counts.get(key, 0) + 1
    total = len(records)
    worst_key, worst = "", 0.0
    parts = []
    for key in sorted(set(counts) | set(spec.target_distribution)):
        observed = counts.get(key, 0) / total
        dev = 100.0 * abs(observed - spec.target_distribution.get(key, 0.0))
        parts.append(f"{key} {100 * observed:.2f}%")
        if dev > worst:
            worst_key, worst = key, dev
    # percentages are differences of floats; an exact-boundary deviation must not fail by an ulp
    ok = worst <= spec.tolerance_pp + 1e-9
    detail = ", ".join(parts) + f"; max deviation {worst:.2f} pp"
    if not ok:
        detail += f" ({worst_key}) exceeds {spec.tolerance_pp} pp"
    return AuditCheck("scene_distribution", ok, detail)


def _action_sanity(records: list[dict[str, Any]], v_max: float) -> AuditCheck:
    nonfinite = out_of_box = 0
    for rec in records:
        for step in rec["steps"]:
            for key in ("nominal", "safe"):
                for v in step[key]:
                    if not math.isfinite(v):
                        nonfinite += 1
                    elif abs(v) > v_max:
                        out_of_box += 1
    ok = nonfinite == 0 and out_of_box == 0
    return AuditCheck("action_sanity", ok,
                      f"{nonfinite} non-finite components, {out_of_box} outside [-{v_max}, {v_max}]")


def _length_outliers(records: list[dict[str, Any]], k: float, max_fraction: float) -> AuditCheck:
    if not records:
        return AuditCheck("length_outliers", True, "no episodes")
    lengths = [rec["length"] for rec in records]
    med = median(lengths)
    mad = median(abs(x - med) for x in lengths)
    flagged = sum(1 for x in lengths if abs(x - med) > k * mad)
    frac = flagged / len(lengths)
    return AuditCheck("length_outliers", frac <= max_fraction,
                      f"median {med}, MAD {mad}, {flagged} flagged ({100 * frac:.2f}%, limit {100 * max_fraction:.2f}%)")


def _bptt_integrity(records: list[dict[str, Any]], chunk_length: int) -> AuditCheck:
    short = broken = 0
    for rec in records:
        steps = rec["steps"]
        if rec["length"] != len(steps) or [s["t"] for s in steps] != list(range(len(steps))):
            broken += 1
        if len(steps) < chunk_length:
            short += 1
    ok = short == 0 and broken == 0
    return AuditCheck("bptt_integrity", ok,
                      f"{short} episodes shorter than chunk {chunk_length}, {broken} non-contiguous")


def dataset_audit(path: str | os.PathLike, spec: AuditSpec | None = None) -> AuditReport:
    """Run all four checks; later checks run even when earlier ones fail."""
    spec = spec or AuditSpec()
    header, records = read_dataset(path)
    v_max = float(spec.v_max if spec.v_max is not None else header["v_max"])
    chunk = int(spec.chunk_length if spec.chunk_length is not None else header["chunk_length"])
    checks = (
        _scene_distribution(records, spec),
        _action_sanity(records, v_max),
        _length_outliers(records, spec.mad_k, spec.max_outlier_fraction),
        _bptt_integrity(records, chunk),
    )
    return AuditReport(checks, sha256_file(path))

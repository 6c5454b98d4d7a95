"""Operational auditability: commitments, watchdogs, forensics, checkpoints, audits."""

from .atomic import BOUNDARIES, atomic_write, atomic_writer
from .audit import AuditCheck, AuditReport, AuditSpec, dataset_audit, open_dataset, read_dataset
from .forensics import ForensicsBuffer, load_dump
from .hashing import canonical_json_bytes, sha256_bytes, sha256_file
from .prereg import (
    Commitment,
    Criterion,
    EvaluationReport,
    PreRegistration,
    commit_to_artifact,
    evaluate,
    load_preregistration,
    verify_artifact,
    write_run_manifest,
)
from .watchdog import Watchdog, WatchdogEvent, WatchdogRegistry, watchdogs_from_preregistration

__all__ = [
    "BOUNDARIES", "atomic_write", "atomic_writer",
    "AuditCheck", "AuditReport", "AuditSpec", "dataset_audit", "open_dataset", "read_dataset",
    "ForensicsBuffer", "load_dump",
    "canonical_json_bytes", "sha256_bytes", "sha256_file",
    "Commitment", "Criterion", "EvaluationReport", "PreRegistration", "commit_to_artifact",
    "evaluate", "load_preregistration", "verify_artifact", "write_run_manifest",
    "Watchdog", "WatchdogEvent", "WatchdogRegistry", "watchdogs_from_preregistration",
]

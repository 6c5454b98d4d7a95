"""Curriculum-biased attempt allocation, campaign execution and yield analysis."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .env import EnvConfig, SceneType, TerminationReason, Toy2DAvoidanceEnv
from .errors import InvalidDistribution, KeyMismatch, PCBFError
from .ops.atomic import atomic_write
from .ops.audit import AuditReport, AuditSpec, dataset_audit, open_dataset
from .ops.prereg import Commitment, EvaluationReport, PreRegistration
from .pipeline import Algorithm, ScriptedTeacher, run_episode
from .safety import BarrierParams, DualBarrierCBF

SCENE_ORDER = [s.value for s in SceneType]
SCENE_LABELS = {
    "open": "Open",
    "single_static": "Single static",
    "multi_obstacle": "Multi-obstacle",
    "dynamic_obstacle": "Dynamic obstacle",
}


def _ordered(keys) -> list[str]:
    known = [k for k in SCENE_ORDER if k in keys]
    return known + sorted(k for k in keys if k not in SCENE_ORDER)


def allocate_attempts(distribution: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder rounding of ``total * fraction``; counts sum to ``total``.

    Remainder ties go to the key that comes first in ``distribution``.
    """
    if total < 1:
        raise InvalidDistribution("total must be >= 1")
    if not distribution:
        raise InvalidDistribution("empty distribution")
    if any(not math.isfinite(f) or f < 0 for f in distribution.values()):
        raise InvalidDistribution("fractions must be finite and non-negative")
    if abs(sum(distribution.values()) - 1.0) > 1e-9:
        raise InvalidDistribution(f"fractions sum to {sum(distribution.values())!r}, not 1")
    keys = list(distribution)
    exact = [distribution[k] * total for k in keys]
    counts = [math.floor(x) for x in exact]
    short = total - sum(counts)
    order = sorted(range(len(keys)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return dict(zip(keys, counts))


def expected_aggregate_yield(distribution: Mapping[str, float], predicted_yields: Mapping[str, float]) -> float:
    if set(distribution) != set(predicted_yields):
        raise KeyMismatch(f"distribution keys {sorted(distribution)} != yield keys {sorted(predicted_yields)}")
    return sum(distribution[k] * predicted_yields[k] for k in distribution)


@dataclass(frozen=True)
class BucketStats:
    scene_type: str
    attempts: int
    accepted: int
    predicted_yield: float

    def __post_init__(self) -> None:
        if self.attempts < 0 or not 0 <= self.accepted <= self.attempts:
            raise ValueError("need 0 <= accepted <= attempts")
        if not 0.0 <= self.predicted_yield <= 1.0:
            raise ValueError("predicted_yield must lie in [0, 1]")

    @property
    def observed_yield(self) -> float:
        return self.accepted / self.attempts if self.attempts else float("nan")


@dataclass(frozen=True)
class DeviationRow:
    delta_pp: float
    sigma: float | None
    delta_over_sigma: float | None


def deviation_row(stats: BucketStats) -> DeviationRow:
    """Deviation in percentage points and in Bernoulli standard deviations.

    ``sigma = sqrt(p (1 - p) / N)`` uses the predicted yield ``p``; it is zero
    for ``p`` in {0, 1}, where the ratio is reported as absent.
    """
    if stats.attempts < 1:
        raise ValueError("attempts must be >= 1")
    p = stats.predicted_yield
    delta = stats.observed_yield - p
    sigma = math.sqrt(p * (1.0 - p) / stats.attempts)
    if sigma == 0.0:
        return DeviationRow(100.0 * delta, sigma, None)
    return DeviationRow(100.0 * delta, sigma, delta / sigma)


@dataclass
class YieldTable:
    buckets: list[dict[str, Any]]
    aggregate: dict[str, Any] | None

    def to_dict(self) -> dict[str, Any]:
        return {"buckets": self.buckets, "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "YieldTable":
        return cls(list(data["buckets"]), data["aggregate"])

    def format(self) -> str:
        head = f"{'Scene type':<18} {'Att.':>8} {'Acc.':>8} {'Obs.':>8} {'Pred.':>8} {'Delta (pp)':>10} {'Delta/sigma':>11}"
        lines = [head, "-" * len(head)]

        def row(label: str, r: Mapping[str, Any]) -> str:
            ds = r.get("delta_over_sigma")
            ds_s = "---" if ds is None else f"{ds:.1f}"
            return (f"{label:<18} {r['attempts']:>8,} {r['accepted']:>8,} {100 * r['observed_yield']:>7.2f}% "
                    f"{100 * r['predicted_yield']:>7.2f}% {r['delta_pp']:>+10.2f} {ds_s:>11}")

        for b in self.buckets:
            lines.append(row(SCENE_LABELS.get(b["scene_type"], b["scene_type"]), b))
        if self.aggregate is not None:
            lines.append("-" * len(head))
            lines.append(row("Aggregate", self.aggregate))
        return "\n".join(lines)


def yield_table(
    stats: list[BucketStats],
    predicted: Mapping[str, float] | None = None,
    distribution: Mapping[str, float] | None = None,
) -> YieldTable:
    """Per-bucket rows plus an aggregate row (the aggregate carries no sigma ratio).

    The aggregate prediction is the distribution-weighted mean of the predicted
    yields when a distribution is given, else the attempt-weighted mean.
    """
    buckets = []
    for s in stats:
        if predicted is not None and s.scene_type in predicted:
            s = replace(s, predicted_yield=predicted[s.scene_type])
        dev = deviation_row(s)
        buckets.append({
            "scene_type": s.scene_type, "attempts": s.attempts, "accepted": s.accepted,
            "observed_yield": s.observed_yield, "predicted_yield": s.predicted_yield,
            "delta_pp": dev.delta_pp, "sigma": dev.sigma, "delta_over_sigma": dev.delta_over_sigma,
        })
    if not buckets:
        return YieldTable([], None)
    att = sum(b["attempts"] for b in buckets)
    acc = sum(b["accepted"] for b in buckets)
    if distribution:
        pred = expected_aggregate_yield(
            distribution, {k: next(b["predicted_yield"] for b in buckets if b["scene_type"] == k)
                           for k in distribution})
    else:
        pred = sum(b["predicted_yield"] * b["attempts"] for b in buckets) / att
    obs = acc / att
    aggregate = {"scene_type": "aggregate", "attempts": att, "accepted": acc, "observed_yield": obs,
                 "predicted_yield": pred, "delta_pp": 100.0 * (obs - pred), "sigma": None,
                 "delta_over_sigma": None}
    return YieldTable(buckets, aggregate)


def episode_seed(seed: int, bucket_index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, bucket_index, attempt]).generate_state(1)[0])


@dataclass
class CampaignResult:
    dataset_path: Path
    stats: list[BucketStats]
    commitment: Commitment
    audit: AuditReport
    evaluation: EvaluationReport
    table: YieldTable
    metrics: dict[str, float] = field(default_factory=dict)


class CampaignError(PCBFError):
    def __init__(self, scene: str, attempt: int, cause: BaseException):
        self.scene, self.attempt, self.cause = scene, attempt, cause
        super().__init__(f"campaign failed at bucket {scene!r}, attempt {attempt}: {cause}")


def run_campaign(
    prereg: PreRegistration,
    total: int,
    seed: int,
    out_dir: str | os.PathLike,
    *,
    commitment: Commitment | None = None,
    policy_factory: Callable[[float, int], Algorithm] | None = None,
    env_config: EnvConfig | None = None,
    barrier: BarrierParams | None = None,
    chunk_length: int = 32,
    audit_tolerance_pp: float = 2.0,
) -> CampaignResult:
    """Run every allocated attempt as one filtered episode and keep the successes.

    Accepted episodes stream to ``out_dir/dataset.jsonl`` in (bucket, attempt)
    order. Afterwards the dataset is audited and the pre-registration is
    evaluated; a failed criterion is reported, never raised.
    """
    if not prereg.attempt_distribution:
        raise InvalidDistribution("pre-registration has no attempt_distribution")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_config = env_config or EnvConfig()
    barrier = barrier or BarrierParams(v_max=env_config.v_max)
    if policy_factory is None:
        policy_factory = lambda v_max, _seed: ScriptedTeacher(v_max)  # noqa: E731
    commitment = commitment or Commitment(prereg.sha256(), "")
    allocation = allocate_attempts(
        {k: prereg.attempt_distribution[k] for k in _ordered(prereg.attempt_distribution)}, total)
    flt = DualBarrierCBF(barrier)

    dataset_path = out / "dataset.jsonl"
    stats: list[BucketStats] = []
    reasons: dict[str, int] = {r.value: 0 for r in TerminationReason}
    with open_dataset(dataset_path, env_config.v_max, chunk_length) as writer:
        for b_idx, scene in enumerate(allocation):
            env = Toy2DAvoidanceEnv(replace(env_config, scene=SceneType(scene)), barrier)
            accepted = 0
            for attempt in range(allocation[scene]):
                ep_seed = episode_seed(seed, b_idx, attempt)
                try:
                    rec = run_episode(env, policy_factory(env_config.v_max, ep_seed), flt, ep_seed)
                except PCBFError as exc:
                    raise CampaignError(scene, attempt, exc) from exc
                reasons[rec.termination_reason.value] += 1
                if rec.termination_reason is TerminationReason.SUCCESS:
                    accepted += 1
                    writer.write(rec.to_dict())
            stats.append(BucketStats(scene, allocation[scene], accepted,
                                     prereg.predicted_yields.get(scene, 0.0)))

    weights = {k: prereg.attempt_distribution[k] * prereg.predicted_yields.get(k, 0.0)
               for k in allocation}
    norm = sum(weights.values())
    target = {k: w / norm for k, w in weights.items()} if norm > 0 else {}
    audit = dataset_audit(dataset_path, AuditSpec(target_distribution=target, tolerance_pp=audit_tolerance_pp))

    att = sum(s.attempts for s in stats)
    acc = sum(s.accepted for s in stats)
    metrics: dict[str, float] = {"aggregate_yield": acc / att, "accepted": float(acc), "attempts": float(att)}
    for s in stats:
        metrics[f"yield.{s.scene_type}"] = s.observed_yield
    for r, n in reasons.items():
        metrics[f"rate.{r}"] = n / att
    evaluation = prereg.evaluate(metrics)
    predicted = dict(prereg.predicted_yields) if set(prereg.predicted_yields) >= set(allocation) else None
    table = yield_table(stats, None,
                        {k: prereg.attempt_distribution[k] for k in allocation} if predicted else None)

    for name, payload in (("audit.json", audit.to_dict()), ("evaluation.json", evaluation.to_dict()),
                          ("yield_table.json", table.to_dict())):
        atomic_write(out / name, json.dumps(payload, indent=2).encode("utf-8") + b"\n")
    atomic_write(out / "yield_table.txt", table.format().encode("utf-8") + b"\n")
    manifest = {
        "prereg_sha256": commitment.sha256,
        "prereg_artifact": commitment.artifact_path,
        "dataset": dataset_path.name,
        "dataset_sha256": audit.dataset_sha256,
        "total": total,
        "seed": seed,
        "files": ["dataset.jsonl", "audit.json", "evaluation.json", "yield_table.json", "yield_table.txt"],
        "metrics": metrics,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8") + b"\n")
    return CampaignResult(dataset_path, stats, commitment, audit, evaluation, table, metrics)

"""Command-line front end.

Exit codes:

    0  success (or: evaluation/audit passed)
    1  evaluation or audit failed
    2  malformed input (config, spec, metrics, schema, dataset)
    3  runtime error while running episodes
    4  tampered pre-registration artifact
    5  halt demo could not verify one of its properties
"""

from __future__ import annotations

import argparse
import functools
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .campaign import BucketStats, run_campaign, yield_table
from .env import EnvConfig, SceneType, TerminationReason, Toy2DAvoidanceEnv, Toy2DAvoidanceVecEnv
from .errors import InvalidConfig, InvalidPreRegistration, MalformedDataset, PCBFError, TamperDetected
from .ops.atomic import atomic_write
from .ops.audit import AuditSpec, dataset_audit
from .ops.forensics import ForensicsBuffer, load_dump
from .ops.hashing import sha256_file
from .ops.prereg import (
    Criterion,
    PreRegistration,
    commit_to_artifact,
    load_preregistration,
    verify_artifact,
    write_run_manifest,
)
from .ops.watchdog import WatchdogEvent, watchdogs_from_preregistration
from .pipeline import SafeVecWrapper, make_policy, run_episode
from .safety import BarrierParams, DualBarrierCBF, PassThroughFilter

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_MALFORMED = 2
EXIT_RUNTIME = 3
EXIT_TAMPER = 4
EXIT_HALT_UNVERIFIED = 5

POLICIES = ("random", "scripted")


class _Malformed(Exception):
    """Input that cannot be parsed or validated; maps to exit code 2."""


def _read_json(path: str | Path, what: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise _Malformed(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _Malformed(f"{what} {path} is not valid JSON: {exc}") from exc


def _write_json(path: Path, payload: Any) -> None:
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=False).encode("utf-8") + b"\n")


def _count(value: Any, name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise InvalidConfig(f"{name} must be an integer >= {minimum}")
    return value


# -- run config ----------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    barrier: BarrierParams = field(default_factory=BarrierParams)
    policy: str = "random"
    num_envs: int = 1
    episodes: int = 1
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise InvalidConfig(f"policy must be one of {POLICIES}, got {self.policy!r}")
        _count(self.num_envs, "num_envs", 1)
        _count(self.episodes, "episodes", 1)
        _count(self.seed, "seed", 0)
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise InvalidConfig("output_dir must be a non-empty path")
        self.env.validate()
        if self.barrier.v_max != self.env.v_max:
            raise InvalidConfig("barrier.v_max must equal env.v_max")

    def to_dict(self) -> dict[str, Any]:
        return {"env": self.env.to_dict(), "barrier": self.barrier.to_dict(), "policy": self.policy,
                "num_envs": self.num_envs, "episodes": self.episodes, "output_dir": self.output_dir,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise InvalidConfig("run config must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown run-config keys: {sorted(unknown)}")
        kwargs = dict(data)
        env = EnvConfig.from_dict(kwargs.pop("env", {}))
        barrier_raw = dict(kwargs.pop("barrier", {}))
        barrier_raw.setdefault("v_max", env.v_max)
        try:
            barrier = BarrierParams.from_dict(barrier_raw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"barrier: {exc}") from exc
        return cls(env=env, barrier=barrier, **kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    return RunConfig.from_dict(_read_json(path, "config"))


# -- rollout -----------------------------------------------------------------


@dataclass(frozen=True)
class TerminationBreakdown:
    counts: Mapping[str, int]
    filtered: bool
    policy: str
    scene: str

    @property
    def episodes(self) -> int:
        return sum(self.counts.values())

    def fraction(self, reason: str) -> float:
        return self.counts.get(reason, 0) / self.episodes if self.episodes else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"episodes": self.episodes, "filtered": self.filtered, "policy": self.policy,
                "scene": self.scene, "counts": {r.value: self.counts.get(r.value, 0) for r in TerminationReason}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TerminationBreakdown":
        counts = {str(k): int(v) for k, v in data["counts"].items()}
        out = cls(counts, bool(data["filtered"]), str(data["policy"]), str(data["scene"]))
        if out.episodes != data["episodes"]:
            raise ValueError("episode total disagrees with counts")
        return out

    def format(self) -> str:
        labels = {"success": "Success", "collision": "Hard-barrier collision",
                  "out_of_arena": "Out of arena", "timeout": "Timeout"}
        arm = "filtered" if self.filtered else "unfiltered"
        lines = [f"{self.episodes} episodes, policy={self.policy}, scene={self.scene}, {arm}",
                 f"{'Termination':<24} {'Episodes':>16}", "-" * 41]
        for r in TerminationReason:
            n = self.counts.get(r.value, 0)
            lines.append(f"{labels[r.value]:<24} {f'{n} ({100 * self.fraction(r.value):.2f}%)':>16}")
        return "\n".join(lines)


def run_rollouts(cfg: RunConfig, filtered: bool = True) -> TerminationBreakdown:
    """Run ``cfg.episodes`` episodes across ``cfg.num_envs`` parallel sub-envs.

    Episode ``k`` uses env seed and policy seed ``cfg.seed + k`` whichever
    sub-env hosts it, so the result does not depend on ``num_envs``.
    """
    n = min(cfg.num_envs, cfg.episodes)
    vec = Toy2DAvoidanceVecEnv(cfg.env, n, cfg.barrier)
    flt = DualBarrierCBF(cfg.barrier) if filtered else PassThroughFilter(cfg.barrier)
    env = SafeVecWrapper(vec, flt)
    obs, _ = env.reset(cfg.seed)
    obs = obs.copy()
    policies = [make_policy(cfg.policy, cfg.env.v_max, cfg.seed + i) for i in range(n)]
    hidden: list[Any] = [None] * n
    active = [True] * n
    next_episode = n
    counts = {r.value: 0 for r in TerminationReason}
    while any(active):
        actions = np.zeros((n, 2))
        for i in range(n):
            if active[i]:
                actions[i], hidden[i] = policies[i].predict(obs[i], hidden[i])
        out = env.step(actions, active)
        obs = out.observations.copy()
        for i in range(n):
            if not active[i] or not (out.terminated[i] or out.truncated[i]):
                continue
            counts[out.termination_reasons[i].value] += 1
            if next_episode < cfg.episodes:
                s = cfg.seed + next_episode
                obs[i], _ = env.reset_env(i, s)
                policies[i] = make_policy(cfg.policy, cfg.env.v_max, s)
                hidden[i] = None
                next_episode += 1
            else:
                active[i] = False
    scene = cfg.env.scene.value if isinstance(cfg.env.scene, SceneType) else "custom"
    return TerminationBreakdown(counts, filtered, cfg.policy, scene)


def cmd_rollout(args: argparse.Namespace) -> int:
    try:
        cfg = load_run_config(args.config)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
    except (_Malformed, InvalidConfig) as exc:
        return _fail(EXIT_MALFORMED, exc)
    except OSError as exc:
        return _fail(EXIT_MALFORMED, f"output_dir not creatable: {exc}")
    try:
        breakdown = run_rollouts(cfg, filtered=not args.no_filter)
        _write_json(out / "breakdown.json", breakdown.to_dict())
        atomic_write(out / "breakdown.txt", breakdown.format().encode("utf-8") + b"\n")
        _write_json(out / "manifest.json", {"command": "rollout", "config": cfg.to_dict(),
                                            "files": ["breakdown.json", "breakdown.txt"]})
    except (PCBFError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(breakdown.format())
    return EXIT_OK


# -- pre-registration --------------------------------------------------------


def cmd_prereg_commit(args: argparse.Namespace) -> int:
    try:
        raw = _read_json(args.spec, "spec")
        if isinstance(raw, dict):
            # without an explicit timestamp the spec file alone determines the hash;
            # the commit time goes into the manifest
            raw = {"created_at": "", **raw}
        prereg = PreRegistration.from_dict(raw)
    except (_Malformed, InvalidPreRegistration) as exc:
        return _fail(EXIT_MALFORMED, exc)
    try:
        commitment = commit_to_artifact(prereg, args.out)
        manifest = write_run_manifest(commitment)
    except OSError as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(commitment.sha256)
    print(f"artifact: {args.out}\nmanifest: {manifest}", file=sys.stderr)
    return EXIT_OK


def _load_metrics(path: str) -> dict[str, float]:
    raw = _read_json(path, "metrics")
    if not isinstance(raw, dict):
        raise _Malformed("metrics file must be a JSON object")
    out = {}
    for k, v in raw.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise _Malformed(f"metric {k!r} must be a finite number")
        out[k] = float(v)
    return out


def _verified_prereg(artifact: str) -> tuple[PreRegistration, Any]:
    commitment = verify_artifact(artifact)
    return load_preregistration(artifact), commitment


def cmd_prereg_eval(args: argparse.Namespace) -> int:
    try:
        prereg, _ = _verified_prereg(args.artifact)
    except TamperDetected as exc:
        return _fail(EXIT_TAMPER, f"tamper: {exc}")
    except InvalidPreRegistration as exc:
        return _fail(EXIT_MALFORMED, exc)
    try:
        metrics = _load_metrics(args.metrics)
    except _Malformed as exc:
        return _fail(EXIT_MALFORMED, exc)
    report = prereg.evaluate(metrics)
    for r in report.results:
        observed = "missing" if r.observed is None else f"{r.observed:g}"
        print(f"[{r.status.upper()}] {r.metric} {r.comparator} {r.threshold:g} (observed {observed})")
    print(f"overall: {report.overall.upper()}  prereg sha256={report.prereg_sha256}")
    return EXIT_OK if report.passed else EXIT_FAIL


# -- campaign ----------------------------------------------------------------


def _replay_stats(path: str, prereg: PreRegistration) -> list[BucketStats]:
    raw = _read_json(path, "replay counts")
    if not isinstance(raw, dict) or not raw:
        raise _Malformed("replay counts must be a non-empty JSON object")
    stats = []
    for key, entry in raw.items():
        try:
            scene = SceneType.parse(key).value
            attempts, accepted = int(entry["attempts"]), int(entry["accepted"])
            predicted = entry.get("predicted_yield", prereg.predicted_yields.get(scene))
            if predicted is None:
                raise _Malformed(f"no predicted yield for {scene}")
            stats.append(BucketStats(scene, attempts, accepted, float(predicted)))
        except (ValueError, TypeError, KeyError) as exc:
            raise _Malformed(f"bad replay entry {key!r}: {exc}") from exc
    return stats


def cmd_campaign(args: argparse.Namespace) -> int:
    try:
        prereg, commitment = _verified_prereg(args.prereg)
    except TamperDetected as exc:
        return _fail(EXIT_TAMPER, f"tamper: {exc}")
    except InvalidPreRegistration as exc:
        return _fail(EXIT_MALFORMED, exc)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_MALFORMED, f"--out not creatable: {exc}")

    if args.replay_counts:
        try:
            table = yield_table(_replay_stats(args.replay_counts, prereg))
        except _Malformed as exc:
            return _fail(EXIT_MALFORMED, exc)
        try:
            _write_json(out / "yield_table.json", table.to_dict())
            atomic_write(out / "yield_table.txt", table.format().encode("utf-8") + b"\n")
            _write_json(out / "manifest.json", {
                "command": "campaign", "mode": "replay", "prereg_sha256": commitment.sha256,
                "prereg_artifact": commitment.artifact_path, "replay_counts": str(args.replay_counts),
                "replay_sha256": sha256_file(args.replay_counts),
                "files": ["yield_table.json", "yield_table.txt"]})
        except OSError as exc:
            return _fail(EXIT_RUNTIME, exc)
        print(table.format())
        return EXIT_OK

    if args.total is None or args.seed is None:
        return _fail(EXIT_MALFORMED, "--total and --seed are required unless --replay-counts is given")
    if args.total < 1 or args.seed < 0:
        return _fail(EXIT_MALFORMED, "--total must be >= 1 and --seed >= 0")
    if not prereg.attempt_distribution:
        return _fail(EXIT_MALFORMED, "pre-registration has no attempt_distribution")
    try:
        result = run_campaign(prereg, args.total, args.seed, out, commitment=commitment)
    except (PCBFError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(result.table.format())
    print(result.audit.format())
    print(f"pre-registration: {result.evaluation.overall.upper()}")
    print(f"dataset sha256: {result.audit.dataset_sha256}")
    return EXIT_OK


# -- audit -------------------------------------------------------------------


def cmd_audit(args: argparse.Namespace) -> int:
    try:
        raw = _read_json(args.schema, "schema")
        if not isinstance(raw, dict):
            raise _Malformed("schema must be a JSON object")
        spec = AuditSpec.from_dict(raw)
        report = dataset_audit(args.dataset, spec)
    except (_Malformed, MalformedDataset, TypeError, ValueError) as exc:
        return _fail(EXIT_MALFORMED, exc)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_FAIL


# -- halt demo ----------------------------------------------------------------

HALT_METRIC = "stage0_success_rate"
DOWNSTREAM_MARKER = "stage1_started"


def synthetic_loss(step: int, start: float = 0.368, plateau: float = 0.0595, scale: float = 25.0) -> float:
    """Exponential decay onto a plateau; stands in for a training loss curve."""
    return plateau + (start - plateau) * math.exp(-step / scale)


def _stage0_success_rate(episodes: int = 4, seed: int = 0) -> float:
    cfg = EnvConfig(scene=SceneType.SINGLE_STATIC, max_steps=100)
    env = Toy2DAvoidanceEnv(cfg)
    flt = DualBarrierCBF(BarrierParams(v_max=cfg.v_max))
    wins = 0
    for k in range(episodes):
        rec = run_episode(env, make_policy("random", cfg.v_max, seed + k), flt, seed + k, record_steps=False)
        wins += rec.termination_reason is TerminationReason.SUCCESS
    return wins / episodes


def run_halt_demo(out: Path, training_steps: int = 120) -> tuple[dict[str, bool], dict[str, Any]]:
    """Gate a downstream stage on a committed criterion the stage-0 policy cannot meet."""
    out.mkdir(parents=True, exist_ok=True)
    prereg = PreRegistration(
        name="halt-demo",
        criteria=(Criterion(HALT_METRIC, ">=", 0.85),),
        notes="stage-0 gate; a random policy cannot reach it",
        created_at="",
    )
    artifact = out / "prereg.json"
    commitment = commit_to_artifact(prereg, artifact)
    manifest_path = write_run_manifest(commitment)
    registry = watchdogs_from_preregistration(prereg, commitment)
    forensics = ForensicsBuffer(capacity=64)

    for step in range(training_steps):
        metrics = {"loss": synthetic_loss(step)}
        forensics.record(step, metrics)
        registry.update(metrics, step)
    eval_metrics = {HALT_METRIC: _stage0_success_rate()}
    forensics.record(training_steps, eval_metrics)
    registry.update(eval_metrics, training_steps)

    halt = registry.should_halt()
    files = ["prereg.json", manifest_path.name]
    info: dict[str, Any] = {"prereg_sha256": commitment.sha256, "stage0": eval_metrics}
    if halt is not None:
        dump = forensics.dump(out, halt)
        files += [dump.name, "halt.json"]
        info["forensics_dump"] = dump.name
        _write_json(out / "halt.json", {"event": halt.to_dict(), "forensics_dump": dump.name,
                                        "prereg_artifact": artifact.name, "manifest": manifest_path.name})
    else:
        (out / DOWNSTREAM_MARKER).write_text("stage 1 started\n", encoding="utf-8")
        files.append(DOWNSTREAM_MARKER)
    _write_json(out / "manifest.json", {"command": "halt-demo", "files": files, **info})
    return verify_halt(out), info


def verify_halt(out: Path) -> dict[str, bool]:
    """Check the three properties of a contractual halt from the files alone."""
    checks = {"halt_cites_commitment": False, "forensics_preserved": False, "downstream_not_run": False}
    try:
        halt = json.loads((out / "halt.json").read_text(encoding="utf-8"))
        event = WatchdogEvent.from_dict(halt["event"])
        recorded = json.loads((out / halt["manifest"]).read_text(encoding="utf-8"))["sha256"]
        actual = sha256_file(out / halt["prereg_artifact"])
        checks["halt_cites_commitment"] = event.is_halt and event.commitment_sha256 == recorded == actual
        dump = load_dump(out / halt["forensics_dump"])
        checks["forensics_preserved"] = dump["trigger"] == event.to_dict() and bool(dump["entries"])
    except (OSError, KeyError, TypeError, ValueError):
        pass
    checks["downstream_not_run"] = not (out / DOWNSTREAM_MARKER).exists()
    return checks


def cmd_halt_demo(args: argparse.Namespace) -> int:
    try:
        checks, info = run_halt_demo(Path(args.out))
    except (PCBFError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    labels = {
        "halt_cites_commitment": "halt event cites the committed pre-registration sha256",
        "forensics_preserved": "forensics dump written with the trigger event",
        "downstream_not_run": "downstream stage marker absent",
    }
    print(f"stage-0 {HALT_METRIC} = {info['stage0'][HALT_METRIC]:.2f} (gate >= 0.85)")
    for key, ok in checks.items():
        print(f"[{'x' if ok else ' '}] {labels[key]}")
    return EXIT_OK if all(checks.values()) else EXIT_HALT_UNVERIFIED


# -- entry point -------------------------------------------------------------


def _fail(code: int, message: Any) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


@functools.lru_cache(maxsize=1)
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcbf", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=__doc__.split("\n", 2)[2])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rollout", help="run episodes and report how they terminated")
    p.add_argument("--config", required=True, help="run-config JSON (env, barrier, policy, num_envs, "
                                                   "episodes, output_dir, seed)")
    p.add_argument("--no-filter", action="store_true", help="drive the env with raw nominal actions")
    p.set_defaults(func=cmd_rollout)

    pre = sub.add_parser("prereg", help="commit or evaluate a pre-registration")
    pre_sub = pre.add_subparsers(dest="prereg_command", required=True)
    p = pre_sub.add_parser("commit", help="write the canonical artifact and its manifest, print the sha256")
    p.add_argument("--spec", required=True, help="pre-registration JSON")
    p.add_argument("--out", required=True, help="artifact path; the manifest goes to <out>.manifest.json")
    p.set_defaults(func=cmd_prereg_commit)
    p = pre_sub.add_parser("eval", help="evaluate metrics against a committed artifact")
    p.add_argument("--artifact", required=True, help="committed pre-registration artifact")
    p.add_argument("--metrics", required=True, help="JSON object mapping metric names to numbers")
    p.set_defaults(func=cmd_prereg_eval)

    p = sub.add_parser("campaign", help="run a pre-registered data-collection campaign")
    p.add_argument("--prereg", required=True, help="committed pre-registration artifact")
    p.add_argument("--total", type=int, help="total attempts across all scene buckets")
    p.add_argument("--seed", type=int, help="campaign seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--replay-counts", metavar="FILE",
                   help="JSON {scene: {attempts, accepted[, predicted_yield]}}; build the yield table "
                        "from these counts instead of running episodes")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("audit", help="audit an episode dataset")
    p.add_argument("--dataset", required=True, help="dataset JSONL file")
    p.add_argument("--schema", required=True, help="audit settings JSON (target_distribution, tolerance_pp, ...)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("halt-demo", help="end-to-end contractual halt demonstration")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_halt_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Safety wrapper, algorithm contract, reference policies and rollouts."""

from __future__ import annotations

import abc
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .env import (
    OBS_DIM,
    SceneType,
    StepResult,
    TerminationReason,
    Toy2DAvoidanceEnv,
    Toy2DAvoidanceVecEnv,
    VecStepResult,
)
from .errors import CorruptArtifact, ShapeMismatch
from .ops.atomic import FaultHook, atomic_write
from .ops.hashing import canonical_json_bytes, sha256_bytes
from .safety import DualBarrierCBF, SafetyError, SafetyFilter

# -- safety wrapper ----------------------------------------------------------


class SafetyWrapper:
    """Filters every nominal action through ``safety_filter`` before the env sees it."""

    def __init__(self, env: Toy2DAvoidanceEnv, safety_filter: SafetyFilter):
        fv = getattr(safety_filter, "params", None)
        if fv is not None and fv.v_max != env.config.v_max:
            raise ValueError("filter and env disagree on the action box (v_max)")
        self.env = env
        self.safety_filter = safety_filter
        self._obs: np.ndarray | None = None

    def reset(self, seed: int | None = None):
        self._obs, state = self.env.reset(seed)
        return self._obs, state

    def step(self, nominal_action: Sequence[float]) -> StepResult:
        result = self.safety_filter.filter_action(self._obs, nominal_action, self.env.safety_state())
        step = self.env.step(result.safe_action)
        step.info["filter"] = result
        step.info["nominal_action"] = np.array([float(nominal_action[0]), float(nominal_action[1])])
        self._obs = step.observation
        return step

    def __getattr__(self, name: str) -> Any:
        return getattr(self.env, name)


class SafeVecWrapper:
    """Batched counterpart of :class:`SafetyWrapper` over a vectorized env."""

    def __init__(self, vec_env: Toy2DAvoidanceVecEnv, safety_filter: SafetyFilter):
        self.env = vec_env
        self.safety_filter = safety_filter
        self._obs: np.ndarray | None = None

    def reset(self, seed: int | None = None):
        self._obs, states = self.env.reset(seed)
        return self._obs, states

    def reset_env(self, index: int, seed: int):
        obs, state = self.env.reset_env(index, seed)
        self._obs[index] = obs
        return obs, state

    def step(self, nominals: Any, mask: Sequence[bool] | None = None) -> VecStepResult:
        nominals = np.asarray(nominals, dtype=np.float64)
        n = self.env.num_envs
        mask = [True] * n if mask is None else [bool(m) for m in mask]
        idx = [i for i in range(n) if mask[i]]
        states = self.env.safety_states()
        safe = nominals.copy()
        filtered: dict[int, Any] = {}
        if idx:
            results = self.safety_filter.filter_action_batch(
                [states[i] for i in idx], nominals[idx], [self._obs[i] for i in idx])
            for i, res in zip(idx, results):
                if isinstance(res, SafetyError):
                    raise res
                safe[i] = res.safe_action
                filtered[i] = res
        out = self.env.step(safe, mask)
        for i, res in filtered.items():
            out.infos[i]["filter"] = res
            out.infos[i]["nominal_action"] = nominals[i].copy()
        self._obs = out.observations
        return out


def wrap(env, safety_filter: SafetyFilter | None = None):
    """Bind ``env`` (scalar or vectorized) to a filter; defaults to the dual-barrier CBF."""
    if safety_filter is None:
        cfg = env.config
        from .safety import BarrierParams
        safety_filter = DualBarrierCBF(BarrierParams(v_max=cfg.v_max))
    if isinstance(env, Toy2DAvoidanceVecEnv):
        return SafeVecWrapper(env, safety_filter)
    return SafetyWrapper(env, safety_filter)


# -- algorithm contract ------------------------------------------------------

MAGIC = b"PCBFALG1"
SCHEMA_VERSION = 1
_HEADER = struct.Struct(">8sIQ")
_DIGEST_LEN = 32


@dataclass
class AlgorithmState:
    algorithm: str
    parameters: dict[str, Any]
    rng_state: Any = None
    hidden_state: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {"algorithm": self.algorithm, "parameters": self.parameters,
                "rng_state": self.rng_state, "hidden_state": self.hidden_state}


def encode_state(state: AlgorithmState) -> bytes:
    """Magic, schema version, payload length, canonical JSON payload, SHA-256 trailer."""
    payload = canonical_json_bytes(state.to_dict())
    body = _HEADER.pack(MAGIC, SCHEMA_VERSION, len(payload)) + payload
    return body + bytes.fromhex(sha256_bytes(body))


def decode_state(blob: bytes) -> AlgorithmState:
    if len(blob) < _HEADER.size + _DIGEST_LEN:
        raise CorruptArtifact("file too short")
    magic, version, length = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptArtifact("bad magic bytes")
    if version != SCHEMA_VERSION:
        raise CorruptArtifact(f"unsupported schema version {version}")
    if len(blob) != _HEADER.size + length + _DIGEST_LEN:
        raise CorruptArtifact("payload length does not match file size")
    body, trailer = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if bytes.fromhex(sha256_bytes(body)) != trailer:
        raise CorruptArtifact("sha256 trailer mismatch")
    try:
        data = json.loads(body[_HEADER.size:].decode("utf-8"))
        return AlgorithmState(data["algorithm"], data["parameters"], data["rng_state"], data["hidden_state"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptArtifact(f"bad payload: {exc}") from exc


def save(state: AlgorithmState, path: str | os.PathLike, fault_hook: FaultHook | None = None) -> None:
    atomic_write(path, encode_state(state), fault_hook)


def load(path: str | os.PathLike) -> AlgorithmState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptArtifact(f"cannot read {path}: {exc}") from exc
    return decode_state(blob)


_REGISTRY: dict[str, type["Algorithm"]] = {}


class Algorithm(abc.ABC):
    """Policy interface. ``predict`` threads an optional per-episode hidden state."""

    name: str = "algorithm"

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        _REGISTRY[cls.name] = cls

    @abc.abstractmethod
    def predict(self, observation: Any, hidden: Any = None) -> tuple[np.ndarray, Any]:
        ...

    def learn(self, env: Any = None, **kwargs: Any) -> dict[str, Any]:
        return {"status": "nothing_to_learn", "algorithm": self.name, "steps": 0}

    @abc.abstractmethod
    def state_dict(self) -> AlgorithmState:
        ...

    @abc.abstractmethod
    def load_state_dict(self, state: AlgorithmState) -> None:
        ...

    def save(self, path: str | os.PathLike, fault_hook: FaultHook | None = None) -> None:
        save(self.state_dict(), path, fault_hook)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Algorithm":
        state = load(path)
        impl = _REGISTRY.get(state.algorithm)
        if impl is None or (cls is not Algorithm and not issubclass(impl, cls)):
            raise CorruptArtifact(f"unknown algorithm {state.algorithm!r}")
        algo = impl.__new__(impl)
        try:
            algo.load_state_dict(state)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptArtifact(f"bad state for {state.algorithm}: {exc}") from exc
        return algo

    @staticmethod
    def _check_obs(observation: Any) -> np.ndarray:
        obs = np.asarray(observation, dtype=np.float64)
        if obs.shape != (OBS_DIM,):
            raise ShapeMismatch(f"expected observation of shape ({OBS_DIM},), got {obs.shape}")
        return obs


class RandomActionAlgorithm(Algorithm):
    """Uniform actions over the action box from a seeded generator."""

    name = "random"

    def __init__(self, v_max: float = 5.0, seed: int = 0):
        self.v_max = float(v_max)
        self.rng = np.random.default_rng(seed)

    def predict(self, observation, hidden=None):
        self._check_obs(observation)
        return self.rng.uniform(-self.v_max, self.v_max, size=2), hidden

    def state_dict(self) -> AlgorithmState:
        return AlgorithmState(self.name, {"v_max": self.v_max}, self.rng.bit_generator.state)

    def load_state_dict(self, state: AlgorithmState) -> None:
        self.v_max = float(state.parameters["v_max"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state.rng_state


def scripted_teacher(observation: Any, v_max: float = 5.0, k_p: float = 1.0) -> np.ndarray:
    """Proportional command toward the goal, saturated in norm at ``v_max``."""
    gx, gy = float(observation[4]), float(observation[5])
    ux, uy = k_p * gx, k_p * gy
    norm = math.hypot(ux, uy)
    if norm > v_max:
        ux, uy = ux * (v_max / norm), uy * (v_max / norm)
    # rescaling can overshoot the box by an ulp
    return np.array([min(max(ux, -v_max), v_max), min(max(uy, -v_max), v_max)])


class ScriptedTeacher(Algorithm):
    name = "scripted"

    def __init__(self, v_max: float = 5.0, k_p: float = 1.0):
        self.v_max = float(v_max)
        self.k_p = float(k_p)

    def predict(self, observation, hidden=None):
        obs = self._check_obs(observation)
        return scripted_teacher(obs, self.v_max, self.k_p), hidden

    def state_dict(self) -> AlgorithmState:
        return AlgorithmState(self.name, {"v_max": self.v_max, "k_p": self.k_p})

    def load_state_dict(self, state: AlgorithmState) -> None:
        self.v_max = float(state.parameters["v_max"])
        self.k_p = float(state.parameters["k_p"])


def make_policy(kind: str, v_max: float, seed: int = 0) -> Algorithm:
    if kind == "random":
        return RandomActionAlgorithm(v_max, seed)
    if kind == "scripted":
        return ScriptedTeacher(v_max)
    raise ValueError(f"unknown policy {kind!r}")


# -- rollouts ----------------------------------------------------------------


@dataclass
class RolloutRecord:
    scene_type: SceneType | None
    seed: int
    termination_reason: TerminationReason | None = None
    steps: list[dict[str, Any]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scene_type": None if self.scene_type is None else self.scene_type.value,
            "seed": self.seed,
            "termination_reason": None if self.termination_reason is None else self.termination_reason.value,
            "length": self.length,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RolloutRecord":
        if data["length"] != len(data["steps"]):
            raise ValueError("length does not match number of steps")
        st = data["scene_type"]
        tr = data["termination_reason"]
        return cls(None if st is None else SceneType.parse(st), data["seed"],
                   None if tr is None else TerminationReason(tr), list(data["steps"]))


def run_episode(
    env: Toy2DAvoidanceEnv,
    policy: Algorithm,
    safety_filter: SafetyFilter | None,
    seed: int,
    record_steps: bool = True,
) -> RolloutRecord:
    """Roll one episode to termination; ``safety_filter=None`` drives the env unfiltered."""
    from .safety import PassThroughFilter, BarrierParams

    flt = safety_filter if safety_filter is not None else PassThroughFilter(BarrierParams(v_max=env.config.v_max))
    wrapped = SafetyWrapper(env, flt)
    obs, _ = wrapped.reset(seed)
    scene = env.scene.scene_type
    rec = RolloutRecord(scene, seed)
    hidden = None
    t = 0
    while True:
        nominal, hidden = policy.predict(obs, hidden)
        res = wrapped.step(nominal)
        if record_steps:
            fr = res.info["filter"]
            rec.steps.append({
                "t": t,
                "obs": obs.tolist(),
                "nominal": res.info["nominal_action"].tolist(),
                "safe": fr.safe_action.tolist(),
                "modified": fr.modified,
                "h_hard": fr.h_hard,
                "h_soft": fr.h_soft,
            })
        else:
            rec.steps.append({"t": t})
        obs = res.observation
        t += 1
        if res.terminated or res.truncated:
            rec.termination_reason = res.termination_reason
            return rec

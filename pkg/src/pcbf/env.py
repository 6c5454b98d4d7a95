"""Deterministic 2D point-mass avoidance environment and its vectorized variant.

The drone is a single integrator: each step the commanded velocity is clipped
to the action box, then ``position += velocity * dt``. Obstacles are discs; the
dynamic ones move at constant velocity and bounce off the arena walls.

Multi-obstacle scenes expose only the most critical obstacle (minimum
``h_hard``) through :meth:`Toy2DAvoidanceEnv.safety_state`. The single-obstacle
filter therefore guards one disc at a time, which is an approximation when
obstacles sit close together.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import BatchShapeMismatch, InvalidConfig, SteppedAfterTermination
from .safety import BarrierParams, SafetyState, predictive_margin

OBS_DIM = 9
SENTINEL_DISTANCE = 1e6
# SafetyState requires a positive radius, so the virtual obstacle gets a tiny one
SENTINEL_RADIUS = 1e-6

REWARD_SUCCESS = 10.0
REWARD_COLLISION = -10.0
REWARD_OUT_OF_ARENA = -5.0

_MAX_SCENE_TRIES = 1000


class SceneType(str, enum.Enum):
    OPEN = "open"
    SINGLE_STATIC = "single_static"
    MULTI_OBSTACLE = "multi_obstacle"
    DYNAMIC_OBSTACLE = "dynamic_obstacle"

    @classmethod
    def parse(cls, value: "str | SceneType") -> "SceneType":
        if isinstance(value, cls):
            return value
        aliases = {"single": cls.SINGLE_STATIC, "multi": cls.MULTI_OBSTACLE,
                   "dynamic": cls.DYNAMIC_OBSTACLE}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown scene type {value!r}") from None


class TerminationReason(str, enum.Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    OUT_OF_ARENA = "out_of_arena"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {"center": list(self.center), "radius": self.radius, "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Obstacle":
        unknown = set(data) - {"center", "radius", "velocity"}
        if unknown:
            raise InvalidConfig(f"unknown obstacle keys: {sorted(unknown)}")
        c = data["center"]
        v = data.get("velocity", (0.0, 0.0))
        return cls((float(c[0]), float(c[1])), float(data["radius"]), (float(v[0]), float(v[1])))


@dataclass(frozen=True)
class SceneDescriptor:
    obstacles: tuple[Obstacle, ...] = ()
    scene_type: SceneType | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "scene_type": None if self.scene_type is None else self.scene_type.value,
            "obstacles": [o.to_dict() for o in self.obstacles],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SceneDescriptor":
        unknown = set(data) - {"scene_type", "obstacles"}
        if unknown:
            raise InvalidConfig(f"unknown scene keys: {sorted(unknown)}")
        st = data.get("scene_type")
        return cls(tuple(Obstacle.from_dict(o) for o in data.get("obstacles", [])),
                   None if st is None else SceneType.parse(st))


@dataclass(frozen=True)
class EnvConfig:
    """Environment settings.

    ``scene`` is either a fixed :class:`SceneDescriptor` or a :class:`SceneType`,
    in which case a fresh scene is drawn from the reset seed.
    """

    arena_half_extent: float = 50.0
    dt: float = 0.05
    max_steps: int = 400
    goal_position: tuple[float, float] = (20.0, 0.0)
    goal_radius: float = 1.0
    drone_radius: float = 0.3
    v_max: float = 5.0
    spawn_position: tuple[float, float] = (-20.0, 0.0)
    scene: SceneDescriptor | SceneType = SceneType.OPEN
    seed: int = 0

    def validate(self) -> None:
        if not self.dt > 0:
            raise InvalidConfig("dt must be positive")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise InvalidConfig("max_steps must be an integer >= 1")
        for name in ("arena_half_extent", "goal_radius", "drone_radius", "v_max"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        a = self.arena_half_extent
        for name in ("goal_position", "spawn_position"):
            p = getattr(self, name)
            if len(p) != 2 or not all(math.isfinite(c) and abs(c) <= a for c in p):
                raise InvalidConfig(f"{name} must lie inside the arena")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if isinstance(self.scene, SceneDescriptor):
            for ob in self.scene.obstacles:
                if not ob.radius > 0:
                    raise InvalidConfig("obstacle radius must be positive")
                if _h_hard_at(self.spawn_position, ob.center, self.drone_radius + ob.radius) < 0:
                    raise InvalidConfig("obstacle overlaps the spawn point")
        elif not isinstance(self.scene, SceneType):
            raise InvalidConfig("scene must be a SceneDescriptor or SceneType")

    def to_dict(self) -> dict[str, Any]:
        scene = self.scene.value if isinstance(self.scene, SceneType) else self.scene.to_dict()
        return {
            "arena_half_extent": self.arena_half_extent,
            "dt": self.dt,
            "max_steps": self.max_steps,
            "goal_position": list(self.goal_position),
            "goal_radius": self.goal_radius,
            "drone_radius": self.drone_radius,
            "v_max": self.v_max,
            "spawn_position": list(self.spawn_position),
            "scene": scene,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EnvConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown env keys: {sorted(unknown)}")
        kwargs = dict(data)
        try:
            for key in ("goal_position", "spawn_position"):
                if key in kwargs:
                    kwargs[key] = (float(kwargs[key][0]), float(kwargs[key][1]))
            for key in ("arena_half_extent", "dt", "goal_radius", "drone_radius", "v_max"):
                if key in kwargs:
                    kwargs[key] = float(kwargs[key])
            if "scene" in kwargs:
                scene = kwargs["scene"]
                kwargs["scene"] = (SceneDescriptor.from_dict(scene) if isinstance(scene, dict)
                                   else SceneType.parse(scene))
        except (TypeError, ValueError, IndexError, KeyError) as exc:
            raise InvalidConfig(str(exc)) from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    termination_reason: TerminationReason | None
    safety_state: SafetyState
    info: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ConstraintViolations:
    count: int
    steps: tuple[int, ...]
    min_h_hard: float


def _h_hard_at(p: Sequence[float], c: Sequence[float], R: float) -> float:
    dx = p[0] - c[0]
    dy = p[1] - c[1]
    return dx * dx + dy * dy - R * R


def generate_scene(
    scene_type: SceneType | str,
    rng: np.random.Generator,
    config: EnvConfig | None = None,
) -> SceneDescriptor:
    """Draw a scene for one curriculum bucket.

    Obstacles are placed relative to the spawn-goal corridor of ``config``:
    a single static disc sits between the two, multi-obstacle scenes scatter
    3-5 non-overlapping discs around the corridor, and a dynamic disc starts
    off to one side moving across it.
    """
    scene_type = SceneType.parse(scene_type)
    config = config or EnvConfig()
    if scene_type is SceneType.OPEN:
        return SceneDescriptor((), scene_type)

    sx, sy = config.spawn_position
    gx, gy = config.goal_position
    length = math.hypot(gx - sx, gy - sy)
    if length <= 0:
        raise InvalidConfig("spawn and goal coincide")
    ex, ey = (gx - sx) / length, (gy - sy) / length
    nx, ny = -ey, ex
    half = config.arena_half_extent
    dr = config.drone_radius

    def at(t: float, lateral: float) -> tuple[float, float]:
        return (sx + t * length * ex + lateral * nx, sy + t * length * ey + lateral * ny)

    def clear(center: tuple[float, float], radius: float) -> bool:
        if abs(center[0]) > half - radius or abs(center[1]) > half - radius:
            return False
        spawn_gap = _h_hard_at(config.spawn_position, center, radius + dr + 1.0)
        goal_gap = _h_hard_at(config.goal_position, center, radius + dr + config.goal_radius)
        return spawn_gap > 0 and goal_gap > 0

    for _ in range(_MAX_SCENE_TRIES):
        if scene_type is SceneType.SINGLE_STATIC:
            radius = float(rng.uniform(1.5, 4.0))
            center = at(float(rng.uniform(0.3, 0.7)), float(rng.uniform(-0.8, 0.8)) * radius)
            obstacles = [Obstacle(center, radius)]
        elif scene_type is SceneType.MULTI_OBSTACLE:
            count = int(rng.integers(3, 6))
            obstacles = []
            for _k in range(count):
                radius = float(rng.uniform(1.0, 3.0))
                center = at(float(rng.uniform(0.15, 0.85)), float(rng.uniform(-8.0, 8.0)))
                obstacles.append(Obstacle(center, radius))
            # pairwise gap wide enough for the drone to pass
            if any(
                math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
                <= a.radius + b.radius + 2.0 * dr
                for i, a in enumerate(obstacles) for b in obstacles[i + 1:]
            ):
                continue
        else:
            radius = float(rng.uniform(1.0, 2.5))
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            center = at(float(rng.uniform(0.3, 0.7)), side * float(rng.uniform(8.0, 15.0)))
            speed = float(rng.uniform(0.5, 2.0))
            obstacles = [Obstacle(center, radius, (-side * speed * nx, -side * speed * ny))]
        if all(clear(o.center, o.radius) for o in obstacles):
            return SceneDescriptor(tuple(obstacles), scene_type)
    raise InvalidConfig(f"could not place a valid {scene_type.value} scene")


class Toy2DAvoidanceEnv:
    """Single-environment simulator.

    Observation layout (9 floats): drone position, drone velocity, goal
    offset, critical-obstacle center offset, critical-obstacle radius.

    Per-step reward is the decrease in goal distance plus a terminal bonus
    (+10 success, -10 collision, -5 out of arena, 0 timeout), so it stays
    within ``sqrt(2) * v_max * dt + 10`` in absolute value.
    """

    def __init__(self, config: EnvConfig | None = None, barrier: BarrierParams | None = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self.barrier = barrier or BarrierParams(v_max=self.config.v_max)
        self._ready = False
        self._done = False

    # -- lifecycle -----------------------------------------------------------
    def reset(self, seed: int | None = None) -> tuple[np.ndarray, SafetyState]:
        cfg = self.config
        seed = cfg.seed if seed is None else int(seed)
        if seed < 0:
            raise InvalidConfig("seed must be non-negative")
        self.seed = seed
        if isinstance(cfg.scene, SceneType):
            self.scene = generate_scene(cfg.scene, np.random.default_rng(seed), cfg)
        else:
            self.scene = cfg.scene
        self._ob_pos = [list(o.center) for o in self.scene.obstacles]
        self._ob_vel = [list(o.velocity) for o in self.scene.obstacles]
        self._ob_rad = [o.radius for o in self.scene.obstacles]
        self._pos = [float(cfg.spawn_position[0]), float(cfg.spawn_position[1])]
        self._vel = [0.0, 0.0]
        self._t = 0
        self._crit_t = -1
        self._state_t = -1
        self._done = False
        self._ready = True
        self._violations: list[int] = []
        self._prev_dist = self._goal_distance()
        self._min_hh = math.inf
        self._min_hs = math.inf
        state = self.safety_state()
        if self._critical_h() < 0:
            raise InvalidConfig("drone spawns inside an obstacle")
        self._track_minima(state)
        return self._observation(), state

    def step(self, action: Sequence[float]) -> StepResult:
        if not self._ready:
            raise SteppedAfterTermination("call reset() before step()")
        if self._done:
            raise SteppedAfterTermination("episode already finished; reset() first")
        cfg = self.config
        vm = cfg.v_max
        ax, ay = float(action[0]), float(action[1])
        self._vel = [min(max(ax, -vm), vm), min(max(ay, -vm), vm)]
        self._pos[0] += self._vel[0] * cfg.dt
        self._pos[1] += self._vel[1] * cfg.dt
        self._advance_obstacles()
        self._t += 1

        hh = self._critical_h()
        dist = self._goal_distance()
        reward = self._prev_dist - dist
        self._prev_dist = dist
        reason: TerminationReason | None = None
        if hh < 0:
            reason = TerminationReason.COLLISION
            reward += REWARD_COLLISION
            self._violations.append(self._t)
        elif abs(self._pos[0]) > cfg.arena_half_extent or abs(self._pos[1]) > cfg.arena_half_extent:
            reason = TerminationReason.OUT_OF_ARENA
            reward += REWARD_OUT_OF_ARENA
        elif dist <= cfg.goal_radius:
            reason = TerminationReason.SUCCESS
            reward += REWARD_SUCCESS
        elif self._t >= cfg.max_steps:
            reason = TerminationReason.TIMEOUT
        truncated = reason is TerminationReason.TIMEOUT
        terminated = reason is not None and not truncated
        self._done = reason is not None
        state = self.safety_state()
        self._track_minima(state)
        return StepResult(self._observation(), reward, terminated, truncated, reason, state)

    # -- safety contracts ----------------------------------------------------
    def safety_state(self) -> SafetyState:
        if self._state_t == self._t:
            return self._state
        i = self._critical_index()
        if i is None:
            rel = (self._pos[0] - SENTINEL_DISTANCE, self._pos[1])
            state = SafetyState(rel, tuple(self._vel), (0.0, 0.0), self.config.drone_radius, SENTINEL_RADIUS)
        else:
            c = self._ob_pos[i]
            state = SafetyState((self._pos[0] - c[0], self._pos[1] - c[1]), tuple(self._vel),
                                tuple(self._ob_vel[i]), self.config.drone_radius, self._ob_rad[i])
        self._state, self._state_t = state, self._t
        return state

    def safety_metrics(self) -> dict[str, float]:
        state = self.safety_state()
        return {
            "h_hard": self._critical_h() if self._ob_pos else _h_hard_at(
                state.rel_position, (0.0, 0.0), state.drone_radius + state.obstacle_radius),
            "h_soft": _soft(state, self.barrier),
            "min_h_hard": self._min_hh,
            "min_h_soft": self._min_hs,
            "distance_to_goal": self._goal_distance(),
            "step": float(self._t),
        }

    def hard_constraint_violations(self) -> ConstraintViolations:
        return ConstraintViolations(len(self._violations), tuple(self._violations), self._min_hh)

    @property
    def done(self) -> bool:
        return self._done

    @property
    def num_steps(self) -> int:
        return self._t

    @property
    def position(self) -> tuple[float, float]:
        return (self._pos[0], self._pos[1])

    def obstacles(self) -> list[Obstacle]:
        return [Obstacle(tuple(p), r, tuple(v)) for p, r, v in zip(self._ob_pos, self._ob_rad, self._ob_vel)]

    # -- internals -----------------------------------------------------------
    def _advance_obstacles(self) -> None:
        dt = self.config.dt
        limit = self.config.arena_half_extent
        for pos, vel, rad in zip(self._ob_pos, self._ob_vel, self._ob_rad):
            if vel[0] == 0.0 and vel[1] == 0.0:
                continue
            pos[0] += vel[0] * dt
            pos[1] += vel[1] * dt
            # flip for the next step only; this step's displacement stays vel * dt,
            # matching what the filter assumed
            for k in (0, 1):
                if (pos[k] > limit - rad and vel[k] > 0) or (pos[k] < -(limit - rad) and vel[k] < 0):
                    vel[k] = -vel[k]

    def _critical_index(self) -> int | None:
        if self._crit_t == self._t:
            return self._crit
        best, best_h = None, math.inf
        R0 = self.config.drone_radius
        for i, (c, r) in enumerate(zip(self._ob_pos, self._ob_rad)):
            h = _h_hard_at(self._pos, c, R0 + r)
            if h < best_h:
                best, best_h = i, h
        self._crit, self._crit_t = best, self._t
        return best

    def _critical_h(self) -> float:
        i = self._critical_index()
        if i is None:
            return math.inf
        return _h_hard_at(self._pos, self._ob_pos[i], self.config.drone_radius + self._ob_rad[i])

    def _goal_distance(self) -> float:
        g = self.config.goal_position
        return math.hypot(self._pos[0] - g[0], self._pos[1] - g[1])

    def _track_minima(self, state: SafetyState) -> None:
        if self._ob_pos:
            self._min_hh = min(self._min_hh, self._critical_h())
            self._min_hs = min(self._min_hs, _soft(state, self.barrier))

    def _observation(self) -> np.ndarray:
        i = self._critical_index()
        if i is None:
            off, rad = (SENTINEL_DISTANCE - self._pos[0], -self._pos[1]), SENTINEL_RADIUS
        else:
            c = self._ob_pos[i]
            off, rad = (c[0] - self._pos[0], c[1] - self._pos[1]), self._ob_rad[i]
        g = self.config.goal_position
        return np.array([
            self._pos[0], self._pos[1], self._vel[0], self._vel[1],
            g[0] - self._pos[0], g[1] - self._pos[1], off[0], off[1], rad,
        ])


def _soft(state: SafetyState, params: BarrierParams) -> float:
    rx, ry = state.rel_position
    vx, vy = state.drone_velocity
    return (math.sqrt(rx * rx + ry * ry) - state.drone_radius - state.obstacle_radius
            - predictive_margin(math.sqrt(vx * vx + vy * vy), params))


@dataclass
class VecStepResult:
    observations: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    termination_reasons: list[TerminationReason | None]
    safety_states: list[SafetyState]
    stepped: np.ndarray
    infos: list[dict[str, Any]]

    def __getitem__(self, i: int) -> StepResult:
        return StepResult(self.observations[i], float(self.rewards[i]), bool(self.terminated[i]),
                          bool(self.truncated[i]), self.termination_reasons[i], self.safety_states[i],
                          self.infos[i])


class Toy2DAvoidanceVecEnv:
    """``num_envs`` independent environments; sub-env ``i`` is seeded ``seed + i``.

    Finished sub-envs are never auto-reset. Pass ``mask`` to :meth:`step` to
    advance only the running ones, and :meth:`reset_env` to restart one.
    """

    def __init__(self, config: EnvConfig | None = None, num_envs: int = 1,
                 barrier: BarrierParams | None = None):
        if num_envs < 1:
            raise InvalidConfig("num_envs must be >= 1")
        self.config = config or EnvConfig()
        self.num_envs = num_envs
        self.envs = [Toy2DAvoidanceEnv(self.config, barrier) for _ in range(num_envs)]
        self._last: list[StepResult | None] = [None] * num_envs

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, list[SafetyState]]:
        base = self.config.seed if seed is None else int(seed)
        obs, states = [], []
        for i, env in enumerate(self.envs):
            o, s = env.reset(base + i)
            obs.append(o)
            states.append(s)
            self._last[i] = None
        return np.stack(obs), states

    def reset_env(self, index: int, seed: int) -> tuple[np.ndarray, SafetyState]:
        self._last[index] = None
        return self.envs[index].reset(seed)

    def safety_states(self) -> list[SafetyState]:
        return [env.safety_state() for env in self.envs]

    @property
    def done(self) -> np.ndarray:
        return np.array([env.done for env in self.envs])

    def step(self, actions: Any, mask: Sequence[bool] | None = None) -> VecStepResult:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, 2):
            raise BatchShapeMismatch(f"expected actions of shape ({self.num_envs}, 2), got {actions.shape}")
        if mask is None:
            mask = [True] * self.num_envs
        elif len(mask) != self.num_envs:
            raise BatchShapeMismatch("mask length differs from num_envs")
        results = []
        for i, env in enumerate(self.envs):
            if mask[i]:
                res = env.step(actions[i])
                self._last[i] = res
                res.info["stepped"] = True
            else:
                prev = self._last[i]
                res = StepResult(env._observation(), 0.0,
                                 prev.terminated if prev else False,
                                 prev.truncated if prev else False,
                                 prev.termination_reason if prev else None,
                                 env.safety_state(), {"stepped": False})
            results.append(res)
        return VecStepResult(
            observations=np.stack([r.observation for r in results]),
            rewards=np.array([r.reward for r in results]),
            terminated=np.array([r.terminated for r in results]),
            truncated=np.array([r.truncated for r in results]),
            termination_reasons=[r.termination_reason for r in results],
            safety_states=[r.safety_state for r in results],
            stepped=np.array([bool(m) for m in mask]),
            infos=[r.info for r in results],
        )


def with_scene(config: EnvConfig, scene: SceneDescriptor | SceneType | str) -> EnvConfig:
    if isinstance(scene, str) and not isinstance(scene, SceneType):
        scene = SceneType.parse(scene)
    return replace(config, scene=scene)

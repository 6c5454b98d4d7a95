"""Dual-barrier CBF safety filter for a planar single-integrator drone.

The drone is commanded in velocity (``u``), so with ``r = p_drone - p_obstacle``
and obstacle velocity ``v_o`` the relative dynamics are ``dr/dt = u - v_o``.
Two barriers guard the drone:

    h_hard = |r|^2 - R^2                 (non-collision)
    h_soft = |r| - R - D(|v|)             (predictive, velocity-inflated)

with ``D(v) = tau_lag * v + v^2 / (2 a_max)``. Enforcing ``dh/dt + alpha h >= 0``
on each gives two half-spaces in ``u``; the filter returns the Euclidean
projection of the nominal command onto their intersection, then clips it to
the actuator box. A feasible nominal command is returned untouched.

The scalar path works on Python floats and the batch path on numpy arrays.
Both evaluate the same expressions in the same order so the batch output is
bit-identical to a loop of scalar calls.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import DegenerateGeometry, InfeasibleConstraints, SafetyError

FEAS_TOL = 1e-9
DEGENERATE_TOL = 1e-12
TIE_TOL = 1e-12


def _finite(*values: float) -> bool:
    # inf - inf and nan - nan are both nan, so one pass suffices
    return math.isfinite(sum(values)) or all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class SafetyState:
    """Relative geometry of the drone and its most critical obstacle.

    ``rel_position`` is drone minus obstacle center, so a growing norm means
    the drone is receding.
    """

    rel_position: tuple[float, float]
    drone_velocity: tuple[float, float]
    obstacle_velocity: tuple[float, float]
    drone_radius: float
    obstacle_radius: float

    def __post_init__(self) -> None:
        setter = object.__setattr__
        try:
            r = (float(self.rel_position[0]), float(self.rel_position[1]))
            v = (float(self.drone_velocity[0]), float(self.drone_velocity[1]))
            o = (float(self.obstacle_velocity[0]), float(self.obstacle_velocity[1]))
            if len(self.rel_position) != 2 or len(self.drone_velocity) != 2 or len(self.obstacle_velocity) != 2:
                raise IndexError
        except (IndexError, TypeError):
            raise ValueError("vectors must have two numeric components") from None
        setter(self, "rel_position", r)
        setter(self, "drone_velocity", v)
        setter(self, "obstacle_velocity", o)
        setter(self, "drone_radius", float(self.drone_radius))
        setter(self, "obstacle_radius", float(self.obstacle_radius))
        if not _finite(r[0], r[1], v[0], v[1], o[0], o[1], self.drone_radius, self.obstacle_radius):
            raise ValueError("SafetyState components must be finite")
        if self.drone_radius <= 0 or self.obstacle_radius <= 0:
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class BarrierParams:
    alpha: float = 2.0
    tau_lag: float = 0.1
    a_max: float = 4.0
    v_max: float = 5.0

    def __post_init__(self) -> None:
        for name in ("alpha", "tau_lag", "a_max", "v_max"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{name} must be a number")
            object.__setattr__(self, name, float(value))
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.alpha <= 0 or self.a_max <= 0 or self.v_max <= 0 or self.tau_lag < 0:
            raise ValueError("need alpha > 0, tau_lag >= 0, a_max > 0, v_max > 0")

    def to_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "tau_lag": self.tau_lag, "a_max": self.a_max, "v_max": self.v_max}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BarrierParams":
        unknown = set(data) - {"alpha", "tau_lag", "a_max", "v_max"}
        if unknown:
            raise ValueError(f"unknown barrier keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class HalfSpace:
    """The set ``{u : normal . u >= offset}``."""

    normal: tuple[float, float]
    offset: float

    def value(self, u: Sequence[float]) -> float:
        return self.normal[0] * u[0] + self.normal[1] * u[1]

    def contains(self, u: Sequence[float], tol: float = 0.0) -> bool:
        return self.value(u) >= self.offset - tol


@dataclass(frozen=True)
class SafetyFilterResult:
    safe_action: np.ndarray
    modified: bool
    h_hard: float
    h_soft: float
    active_hard: bool
    active_soft: bool
    # the action box cut the projected action; constraint rows may not hold exactly
    box_clipped: bool = False


def effective_radius(state: SafetyState) -> float:
    return state.drone_radius + state.obstacle_radius


def h_hard(state: SafetyState) -> float:
    rx, ry = state.rel_position
    R = effective_radius(state)
    return rx * rx + ry * ry - R * R


def predictive_margin(speed: float, params: BarrierParams) -> float:
    """Lag plus braking distance at ``speed``; zero at rest and nondecreasing."""
    if speed < 0:
        raise ValueError("speed must be non-negative")
    return params.tau_lag * speed + speed * speed / (2.0 * params.a_max)


def h_soft(state: SafetyState, params: BarrierParams) -> float:
    rx, ry = state.rel_position
    vx, vy = state.drone_velocity
    dist = math.sqrt(rx * rx + ry * ry)
    speed = math.sqrt(vx * vx + vy * vy)
    return dist - effective_radius(state) - predictive_margin(speed, params)


def constraint_rows(state: SafetyState, params: BarrierParams) -> tuple[HalfSpace, HalfSpace]:
    """Affine CBF conditions in the commanded velocity.

    The predictive margin is frozen at the measured speed for the step, which
    keeps the soft row affine in ``u``.
    """
    rx, ry = state.rel_position
    ox, oy = state.obstacle_velocity
    dist = math.sqrt(rx * rx + ry * ry)
    if dist < DEGENERATE_TOL:
        raise DegenerateGeometry("drone is at the obstacle center")
    hh = h_hard(state)
    hs = h_soft(state, params)
    a1x = 2.0 * rx
    a1y = 2.0 * ry
    b1 = -params.alpha * hh + (a1x * ox + a1y * oy)
    a2x = rx / dist
    a2y = ry / dist
    b2 = -params.alpha * hs + (a2x * ox + a2y * oy)
    return HalfSpace((a1x, a1y), b1), HalfSpace((a2x, a2y), b2)


def project_two_halfspaces(
    u_nom: Sequence[float], c1: HalfSpace, c2: HalfSpace
) -> tuple[tuple[float, float], tuple[bool, bool]]:
    """Exact Euclidean projection onto the intersection of two half-planes.

    Active sets are enumerated in order: none, single constraint, both. On a
    deviation tie between the two single projections ``c1`` wins.
    """
    ux, uy = float(u_nom[0]), float(u_nom[1])
    a1x, a1y = c1.normal
    a2x, a2y = c2.normal
    b1, b2 = c1.offset, c2.offset
    if (a1x == 0.0 and a1y == 0.0) or (a2x == 0.0 and a2y == 0.0):
        raise ValueError("half-space normals must be nonzero")

    d1 = a1x * ux + a1y * uy
    d2 = a2x * ux + a2y * uy
    ok1 = d1 >= b1
    ok2 = d2 >= b2
    if ok1 and ok2:
        out = (ux, uy)
    else:
        lam1 = (b1 - d1) / (a1x * a1x + a1y * a1y)
        p1x = ux + lam1 * a1x
        p1y = uy + lam1 * a1y
        lam2 = (b2 - d2) / (a2x * a2x + a2y * a2y)
        p2x = ux + lam2 * a2x
        p2y = uy + lam2 * a2y
        use1 = (not ok1) and (a2x * p1x + a2y * p1y >= b2 - FEAS_TOL)
        use2 = (not ok2) and (a1x * p2x + a1y * p2y >= b1 - FEAS_TOL)
        if use1 and use2:
            dev1 = (p1x - ux) * (p1x - ux) + (p1y - uy) * (p1y - uy)
            dev2 = (p2x - ux) * (p2x - ux) + (p2y - uy) * (p2y - uy)
            use2 = not (dev1 <= dev2 + TIE_TOL)
            use1 = not use2
        if use1:
            out = (p1x, p1y)
        elif use2:
            out = (p2x, p2y)
        else:
            det = a1x * a2y - a1y * a2x
            n1 = math.sqrt(a1x * a1x + a1y * a1y)
            n2 = math.sqrt(a2x * a2x + a2y * a2y)
            if abs(det) <= DEGENERATE_TOL * n1 * n2:
                raise InfeasibleConstraints("parallel constraints with disjoint offsets")
            out = ((b1 * a2y - a1y * b2) / det, (a1x * b2 - b1 * a2x) / det)

    act1 = abs(a1x * out[0] + a1y * out[1] - b1) <= FEAS_TOL
    act2 = abs(a2x * out[0] + a2y * out[1] - b2) <= FEAS_TOL
    return out, (act1, act2)


def _clip(x: float, v_max: float) -> float:
    return min(max(x, -v_max), v_max)


def filter_action(
    observation: Any,
    nominal_action: Sequence[float],
    state: SafetyState,
    params: BarrierParams,
) -> SafetyFilterResult:
    """Project ``nominal_action`` onto the safe set, then clip to the action box.

    ``observation`` is accepted for interface compatibility with learned
    filters and is not read.
    """
    nx, ny = float(nominal_action[0]), float(nominal_action[1])
    if not _finite(nx, ny):
        raise ValueError("nominal action must be finite")
    c1, c2 = constraint_rows(state, params)
    (px, py), (act1, act2) = project_two_halfspaces((nx, ny), c1, c2)
    sx = _clip(px, params.v_max)
    sy = _clip(py, params.v_max)
    dx = sx - nx
    dy = sy - ny
    return SafetyFilterResult(
        safe_action=np.array([sx, sy]),
        modified=math.sqrt(dx * dx + dy * dy) > FEAS_TOL,
        h_hard=h_hard(state),
        h_soft=h_soft(state, params),
        active_hard=act1,
        active_soft=act2,
        box_clipped=(sx != px) or (sy != py),
    )


def _stack_states(states: Sequence[SafetyState]) -> dict[str, np.ndarray]:
    return {
        "r": np.array([s.rel_position for s in states], dtype=np.float64),
        "v": np.array([s.drone_velocity for s in states], dtype=np.float64),
        "vo": np.array([s.obstacle_velocity for s in states], dtype=np.float64),
        "dr": np.array([s.drone_radius for s in states], dtype=np.float64),
        "orad": np.array([s.obstacle_radius for s in states], dtype=np.float64),
    }


def filter_action_batch(
    states: Sequence[SafetyState],
    nominals: Any,
    params: BarrierParams,
) -> list[SafetyFilterResult | SafetyError]:
    """Vectorized ``filter_action`` over N environments.

    A slot whose geometry is degenerate or infeasible holds the exception
    instance instead of a result; other slots are unaffected.
    """
    nominals = np.asarray(nominals, dtype=np.float64)
    n = len(states)
    if n < 1 or nominals.shape != (n, 2):
        raise ValueError(f"expected {n} nominal actions of shape (N, 2), got {nominals.shape}")
    if not np.all(np.isfinite(nominals)):
        raise ValueError("nominal actions must be finite")

    s = _stack_states(states)
    rx, ry = s["r"][:, 0], s["r"][:, 1]
    vx, vy = s["v"][:, 0], s["v"][:, 1]
    ox, oy = s["vo"][:, 0], s["vo"][:, 1]
    ux, uy = nominals[:, 0], nominals[:, 1]
    R = s["dr"] + s["orad"]

    with np.errstate(divide="ignore", invalid="ignore"):
        hh = rx * rx + ry * ry - R * R
        dist = np.sqrt(rx * rx + ry * ry)
        speed = np.sqrt(vx * vx + vy * vy)
        hs = dist - R - (params.tau_lag * speed + speed * speed / (2.0 * params.a_max))
        degenerate = dist < DEGENERATE_TOL

        a1x = 2.0 * rx
        a1y = 2.0 * ry
        b1 = -params.alpha * hh + (a1x * ox + a1y * oy)
        a2x = rx / dist
        a2y = ry / dist
        b2 = -params.alpha * hs + (a2x * ox + a2y * oy)

        d1 = a1x * ux + a1y * uy
        d2 = a2x * ux + a2y * uy
        ok1 = d1 >= b1
        ok2 = d2 >= b2
        lam1 = (b1 - d1) / (a1x * a1x + a1y * a1y)
        p1x = ux + lam1 * a1x
        p1y = uy + lam1 * a1y
        lam2 = (b2 - d2) / (a2x * a2x + a2y * a2y)
        p2x = ux + lam2 * a2x
        p2y = uy + lam2 * a2y
        use1 = ~ok1 & (a2x * p1x + a2y * p1y >= b2 - FEAS_TOL)
        use2 = ~ok2 & (a1x * p2x + a1y * p2y >= b1 - FEAS_TOL)
        dev1 = (p1x - ux) * (p1x - ux) + (p1y - uy) * (p1y - uy)
        dev2 = (p2x - ux) * (p2x - ux) + (p2y - uy) * (p2y - uy)
        both = use1 & use2
        use2 = np.where(both, ~(dev1 <= dev2 + TIE_TOL), use2)
        use1 = np.where(both, ~use2, use1)

        det = a1x * a2y - a1y * a2x
        n1 = np.sqrt(a1x * a1x + a1y * a1y)
        n2 = np.sqrt(a2x * a2x + a2y * a2y)
        cx = (b1 * a2y - a1y * b2) / det
        cy = (a1x * b2 - b1 * a2x) / det
        feasible_nom = ok1 & ok2
        corner = ~feasible_nom & ~use1 & ~use2
        infeasible = corner & (np.abs(det) <= DEGENERATE_TOL * n1 * n2)

        px = np.where(feasible_nom, ux, np.where(use1, p1x, np.where(use2, p2x, cx)))
        py = np.where(feasible_nom, uy, np.where(use1, p1y, np.where(use2, p2y, cy)))
        act1 = np.abs(a1x * px + a1y * py - b1) <= FEAS_TOL
        act2 = np.abs(a2x * px + a2y * py - b2) <= FEAS_TOL

        sx = np.minimum(np.maximum(px, -params.v_max), params.v_max)
        sy = np.minimum(np.maximum(py, -params.v_max), params.v_max)
        dx = sx - ux
        dy = sy - uy
        modified = np.sqrt(dx * dx + dy * dy) > FEAS_TOL
        clipped = (sx != px) | (sy != py)

    out: list[SafetyFilterResult | SafetyError] = []
    for i in range(n):
        if degenerate[i]:
            out.append(DegenerateGeometry("drone is at the obstacle center"))
        elif infeasible[i]:
            out.append(InfeasibleConstraints("parallel constraints with disjoint offsets"))
        else:
            out.append(SafetyFilterResult(
                safe_action=np.array([sx[i], sy[i]]),
                modified=bool(modified[i]),
                h_hard=float(hh[i]),
                h_soft=float(hs[i]),
                active_hard=bool(act1[i]),
                active_soft=bool(act2[i]),
                box_clipped=bool(clipped[i]),
            ))
    return out


class SafetyFilter(abc.ABC):
    """Maps a nominal action to a safe one given the current safety state."""

    @abc.abstractmethod
    def filter_action(self, observation: Any, nominal_action: Any,
                      safety_state: SafetyState) -> SafetyFilterResult:
        ...

    def filter_action_batch(self, states: Sequence[SafetyState], nominals: Any,
                            observations: Any = None) -> list[SafetyFilterResult | SafetyError]:
        out: list[SafetyFilterResult | SafetyError] = []
        for i, (state, nominal) in enumerate(zip(states, nominals)):
            obs = None if observations is None else observations[i]
            try:
                out.append(self.filter_action(obs, nominal, state))
            except SafetyError as exc:
                out.append(exc)
        return out


class DualBarrierCBF(SafetyFilter):
    def __init__(self, params: BarrierParams | None = None):
        self.params = params or BarrierParams()

    def filter_action(self, observation, nominal_action, safety_state):
        return filter_action(observation, nominal_action, safety_state, self.params)

    def filter_action_batch(self, states, nominals, observations=None):
        return filter_action_batch(states, nominals, self.params)


class PassThroughFilter(SafetyFilter):
    """Identity filter; the unfiltered control arm of an experiment."""

    def __init__(self, params: BarrierParams | None = None):
        self.params = params or BarrierParams()

    def filter_action(self, observation, nominal_action, safety_state):
        action = np.array([float(nominal_action[0]), float(nominal_action[1])])
        return SafetyFilterResult(
            safe_action=action,
            modified=False,
            h_hard=h_hard(safety_state),
            h_soft=h_soft(safety_state, self.params),
            active_hard=False,
            active_soft=False,
        )

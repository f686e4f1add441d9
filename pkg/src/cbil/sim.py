"""Deterministic box-cage environment for a school of fish agents.

The environment stores agents as structure-of-arrays so that a step over the
whole school is a handful of vectorized numpy operations. Every step reads
from the time-t arrays and writes fresh time-(t+1) arrays; nothing is updated
in place, so agent processing order cannot leak into the result.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import (
    FORWARD_AXIS,
    LATERAL_AXIS,
    UP,
    YAW_AXIS,
    heading_quat,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_rotate,
)


class PlacementError(RuntimeError):
    """Raised when agents cannot be spawned with the required separation."""


class Role(enum.IntEnum):
    NORMAL = 0
    DOMINANT = 1
    SUBORDINATE = 2


@dataclass(frozen=True)
class CageSpec:
    """Axis-aligned cage centred on the origin; ``height`` runs along +y."""

    width: float = 12.0
    depth: float = 12.0
    height: float = 9.0

    def __post_init__(self):
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError(f"cage dimensions must be positive, got {self}")

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * np.array([self.width, self.height, self.depth])

    @property
    def center(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.width**2 + self.depth**2 + self.height**2)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Strict interior test, vectorized over the leading axes."""
        return np.all(np.abs(points) < self.half_extents, axis=-1)

    def face_distance(self, points: np.ndarray) -> np.ndarray:
        return np.min(self.half_extents - np.abs(points), axis=-1)


@dataclass(frozen=True)
class ActionBounds:
    delta_speed: float = 0.2
    delta_yaw: float = 0.3
    delta_pitch: float = 0.15

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_speed, self.delta_yaw, self.delta_pitch])


@dataclass(frozen=True)
class Action:
    delta_speed: float = 0.0
    delta_yaw: float = 0.0
    delta_pitch: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_speed, self.delta_yaw, self.delta_pitch], dtype=np.float64)


@dataclass
class AgentState:
    position: np.ndarray
    forward: np.ndarray
    rotation: np.ndarray
    speed: float
    role: Role = Role.NORMAL
    alive: bool = True

    @classmethod
    def from_heading(cls, position, yaw: float = 0.0, pitch: float = 0.0, speed: float = 1.0,
                     role: Role = Role.NORMAL) -> "AgentState":
        q = heading_quat(np.float64(yaw), np.float64(pitch))
        return cls(np.asarray(position, dtype=np.float64), quat_rotate(q, FORWARD_AXIS), q,
                   float(speed), role, True)

    @property
    def velocity(self) -> np.ndarray:
        return self.forward * self.speed


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 50
    cage: CageSpec = field(default_factory=CageSpec)
    dt: float = 0.1
    body_radius: float = 0.2
    min_separation: float = 0.5
    spawn_margin: float = 1.0
    speed_min: float = 0.8
    speed_max: float = 1.5
    max_pitch: float = 1.0
    bounds: ActionBounds = field(default_factory=ActionBounds)
    # "agent": done agents respawn after ``respawn_cooldown`` steps; "episode": any done resets all
    termination: str = "agent"
    respawn_cooldown: int = 0
    placement_retries: int = 2000

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.termination not in ("agent", "episode"):
            raise ValueError(f"unknown termination mode {self.termination!r}")


@dataclass
class EnvState:
    positions: np.ndarray
    forwards: np.ndarray
    rotations: np.ndarray
    speeds: np.ndarray
    roles: np.ndarray
    alive: np.ndarray
    cooldown: np.ndarray
    food: np.ndarray
    cage: CageSpec
    time_step: int
    dt: float
    config: EnvConfig
    rng: np.random.Generator

    @property
    def n(self) -> int:
        return len(self.speeds)

    @property
    def velocities(self) -> np.ndarray:
        return self.forwards * self.speeds[:, None]

    def agent(self, i: int) -> AgentState:
        return AgentState(self.positions[i].copy(), self.forwards[i].copy(), self.rotations[i].copy(),
                          float(self.speeds[i]), Role(int(self.roles[i])), bool(self.alive[i]))

    @property
    def agents(self) -> list[AgentState]:
        return [self.agent(i) for i in range(self.n)]

    def copy(self) -> "EnvState":
        return replace(
            self,
            positions=self.positions.copy(), forwards=self.forwards.copy(),
            rotations=self.rotations.copy(), speeds=self.speeds.copy(), roles=self.roles.copy(),
            alive=self.alive.copy(), cooldown=self.cooldown.copy(), food=self.food.copy(),
            rng=copy.deepcopy(self.rng),
        )

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.positions, self.rotations, self.speeds, self.roles, self.alive, self.food):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.time_step).encode())
        return h.hexdigest()


# --------------------------------------------------------------------------- kinematics


def pitch_of(forwards: np.ndarray) -> np.ndarray:
    return np.arcsin(np.clip(forwards[..., 1], -1.0, 1.0))


def integrate(positions, rotations, speeds, actions, dt, speed_range=(0.8, 1.5), max_pitch=None):
    """Advance arrays of agents by one step. Returns (positions, rotations, forwards, speeds)."""
    actions = np.asarray(actions, dtype=np.float64)
    d_speed, d_yaw, d_pitch = actions[..., 0], actions[..., 1], actions[..., 2]
    if max_pitch is not None:
        cur = pitch_of(quat_rotate(rotations, FORWARD_AXIS))
        d_pitch = np.clip(cur + d_pitch, -max_pitch, max_pitch) - cur
    q_yaw = quat_from_axis_angle(YAW_AXIS, d_yaw)
    q_pitch = quat_from_axis_angle(LATERAL_AXIS, d_pitch)
    new_rot = quat_normalize(quat_mul(quat_mul(q_yaw, rotations), q_pitch))
    new_fwd = quat_rotate(new_rot, FORWARD_AXIS)
    new_fwd = new_fwd / np.linalg.norm(new_fwd, axis=-1, keepdims=True)
    new_speed = np.clip(speeds + d_speed, speed_range[0], speed_range[1])
    new_pos = positions + new_fwd * new_speed[..., None] * dt
    return new_pos, new_rot, new_fwd, new_speed


def _check_finite(actions: np.ndarray) -> None:
    if not np.all(np.isfinite(actions)):
        raise ValueError("action components must be finite")


def step_agent(state: AgentState, action: Action, dt: float, cage: CageSpec,
               bounds: ActionBounds | None = None, speed_range=(0.8, 1.5),
               max_pitch: float | None = None) -> tuple[AgentState, dict]:
    """Integrate a single agent. ``bounds`` clamps the action first when given."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = action.as_array()
    _check_finite(a)
    if bounds is not None:
        lim = bounds.as_array()
        a = np.clip(a, -lim, lim)
    pos, rot, fwd, speed = integrate(state.position, state.rotation, np.float64(state.speed), a, dt,
                                     speed_range, max_pitch)
    new = AgentState(pos, fwd, rot, float(speed), state.role, state.alive)
    return new, {"boundary": not bool(cage.contains(pos))}


# --------------------------------------------------------------------------- environment


def _random_headings(rng, n):
    yaw = rng.uniform(-math.pi, math.pi, size=n)
    rot = heading_quat(yaw, np.zeros(n))
    return rot, quat_rotate(rot, FORWARD_AXIS)


def _place(rng, config: EnvConfig, fixed: np.ndarray, n: int) -> np.ndarray:
    """Uniform rejection sampling keeping ``min_separation`` from ``fixed`` and each other."""
    half = config.cage.half_extents - config.spawn_margin
    half = np.where(half > 0, half, 0.5 * config.cage.half_extents)
    placed = [p for p in fixed]
    out = np.empty((n, 3))
    sep2 = config.min_separation**2
    for k in range(n):
        for _ in range(config.placement_retries):
            p = rng.uniform(-half, half)
            if not placed or np.min(np.sum((np.asarray(placed) - p) ** 2, axis=1)) >= sep2:
                break
        else:
            raise PlacementError(
                f"could not place agent {k} with separation {config.min_separation} m "
                f"after {config.placement_retries} attempts")
        out[k] = p
        placed.append(p)
    return out


def init_environment(config: EnvConfig, seed: int) -> EnvState:
    rng = np.random.default_rng(seed)
    n = config.n_agents
    positions = _place(rng, config, np.empty((0, 3)), n)
    rot, fwd = _random_headings(rng, n)
    speeds = rng.uniform(config.speed_min, config.speed_max, size=n)
    return EnvState(
        positions=positions, forwards=fwd, rotations=rot, speeds=speeds,
        roles=np.full(n, int(Role.NORMAL), dtype=np.int64), alive=np.ones(n, dtype=bool),
        cooldown=np.zeros(n, dtype=np.int64), food=np.empty((0, 3)), cage=config.cage,
        time_step=0, dt=config.dt, config=config, rng=rng,
    )


def _respawn(env: EnvState, idx: np.ndarray) -> None:
    """Re-initialise agents ``idx`` in place (only used on freshly built time-(t+1) arrays)."""
    if len(idx) == 0:
        return
    keep = np.ones(env.n, dtype=bool)
    keep[idx] = False
    keep &= env.alive
    env.positions[idx] = _place(env.rng, env.config, env.positions[keep], len(idx))
    rot, fwd = _random_headings(env.rng, len(idx))
    env.rotations[idx] = rot
    env.forwards[idx] = fwd
    env.speeds[idx] = env.rng.uniform(env.config.speed_min, env.config.speed_max, size=len(idx))
    env.alive[idx] = True
    env.cooldown[idx] = 0


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def collision_flags(env: EnvState, positions: np.ndarray, alive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boundary and agent-agent contact flags for the given positions."""
    boundary = alive & ~env.cage.contains(positions)
    dist = pairwise_distances(positions)
    np.fill_diagonal(dist, np.inf)
    both = alive[:, None] & alive[None, :]
    hit = both & (dist < 2.0 * env.config.body_radius)
    return boundary, hit.any(axis=1)


def step_environment(env: EnvState, actions) -> tuple[EnvState, np.ndarray]:
    """Advance all alive agents from the time-t snapshot.

    ``actions`` has one row (delta_speed, delta_yaw, delta_pitch) per alive
    agent, in index order. Returns the new state and per-agent done flags.
    """
    if isinstance(actions, np.ndarray):
        acts = np.asarray(actions, dtype=np.float64)
    else:
        acts = np.array([a.as_array() if isinstance(a, Action) else np.asarray(a, dtype=np.float64)
                         for a in actions]).reshape(-1, 3)
    alive_idx = np.flatnonzero(env.alive)
    if acts.shape != (len(alive_idx), 3):
        raise ValueError(f"expected {len(alive_idx)} actions, got {acts.shape[0] if acts.ndim else 0}")
    _check_finite(acts)
    cfg = env.config
    lim = cfg.bounds.as_array()
    acts = np.clip(acts, -lim, lim)

    new = env.copy()
    pos, rot, fwd, spd = integrate(env.positions[alive_idx], env.rotations[alive_idx],
                                   env.speeds[alive_idx], acts, env.dt,
                                   (cfg.speed_min, cfg.speed_max), cfg.max_pitch)
    new.positions[alive_idx] = pos
    new.rotations[alive_idx] = rot
    new.forwards[alive_idx] = fwd
    new.speeds[alive_idx] = spd
    new.time_step = env.time_step + 1

    boundary, contact = collision_flags(env, new.positions, env.alive)
    done = boundary | contact
    # keep dead bodies inside the volume; they are invisible until respawn
    margin = cfg.body_radius
    new.positions = np.clip(new.positions, -(env.cage.half_extents - margin), env.cage.half_extents - margin)

    if cfg.termination == "episode":
        if done.any():
            fresh = init_environment(replace(cfg), int(new.rng.integers(2**63 - 1)))
            for name in ("positions", "forwards", "rotations", "speeds"):
                setattr(new, name, getattr(fresh, name))
            new.alive[:] = True
            new.cooldown[:] = 0
        return new, done

    waiting = ~new.alive
    new.cooldown[waiting] -= 1
    new.alive[done] = False
    new.cooldown[done] = cfg.respawn_cooldown
    ready = np.flatnonzero(~new.alive & (new.cooldown <= 0))
    _respawn(new, ready)
    return new, done


def run_hash(env: EnvState, action_stream) -> str:
    h = hashlib.sha256()
    for acts in action_stream:
        env, done = step_environment(env, acts)
        h.update(env.state_hash().encode())
        h.update(done.tobytes())
    return h.hexdigest()


def neighbors(env: EnvState, agent: int, radius: float) -> list[int]:
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0 <= agent < env.n:
        raise IndexError(f"agent index {agent} out of range for {env.n} agents")
    d = np.linalg.norm(env.positions - env.positions[agent], axis=1)
    mask = env.alive & (d <= radius)
    mask[agent] = False
    return [int(i) for i in np.flatnonzero(mask)]


def neighbor_mask(env: EnvState, radius: float) -> np.ndarray:
    """(N, N) boolean matrix: j is within ``radius`` of i (alive, excluding self)."""
    d = pairwise_distances(env.positions)
    m = (d <= radius) & env.alive[None, :] & env.alive[:, None]
    np.fill_diagonal(m, False)
    return m


def spawn_food(env: EnvState, rng: np.random.Generator) -> EnvState:
    new = env.copy()
    half = env.cage.half_extents
    new.food = np.vstack([env.food.reshape(-1, 3), rng.uniform(-half, half)[None, :]])
    return new


def assign_roles(env: EnvState, dominant_fraction: float) -> EnvState:
    if not 0.0 < dominant_fraction < 1.0:
        raise ValueError("dominant_fraction must lie in (0, 1)")
    k = int(math.floor(dominant_fraction * env.n + 1e-9))
    new = env.copy()
    new.roles[:] = int(Role.SUBORDINATE)
    new.roles[:k] = int(Role.DOMINANT)
    return new


def trajectory_records(env: EnvState, done: np.ndarray | None = None, rewards: dict | None = None) -> list[dict]:
    """One JSON-ready dict per agent for the trajectory export."""
    out = []
    for i in range(env.n):
        rec = {
            "t": int(env.time_step),
            "id": i,
            "p": [float(x) for x in env.positions[i]],
            "d": [float(x) for x in env.forwards[i]],
            "q": [float(x) for x in env.rotations[i]],
            "v": float(env.speeds[i]),
            "role": Role(int(env.roles[i])).name.lower(),
            "done": bool(done[i]) if done is not None else False,
        }
        if rewards is not None:
            rec["rw"] = {k: float(v[i]) for k, v in rewards.items()}
        out.append(rec)
    return out


def state_from_records(records: Sequence[dict], config: EnvConfig) -> EnvState:
    """Rebuild an EnvState (positions/orientation only) from one time slice of records."""
    recs = sorted(records, key=lambda r: r["id"])
    n = len(recs)
    return EnvState(
        positions=np.array([r["p"] for r in recs], dtype=np.float64),
        forwards=np.array([r["d"] for r in recs], dtype=np.float64),
        rotations=np.array([r["q"] for r in recs], dtype=np.float64),
        speeds=np.array([r["v"] for r in recs], dtype=np.float64),
        roles=np.array([int(Role[r["role"].upper()]) for r in recs], dtype=np.int64),
        alive=np.ones(n, dtype=bool), cooldown=np.zeros(n, dtype=np.int64), food=np.empty((0, 3)),
        cage=config.cage, time_step=int(recs[0]["t"]) if recs else 0, dt=config.dt, config=config,
        rng=np.random.default_rng(0),
    )


__all__ = [
    "Action", "ActionBounds", "AgentState", "CageSpec", "EnvConfig", "EnvState", "PlacementError", "Role",
    "UP", "assign_roles", "collision_flags", "init_environment", "integrate", "neighbor_mask", "neighbors",
    "pairwise_distances", "run_hash", "spawn_food", "state_from_records", "step_agent", "step_environment",
    "trajectory_records",
]

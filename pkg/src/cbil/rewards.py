"""Behaviour rewards, the rule-based regulariser and the weighted total reward.

Each reward has a scalar form taking :class:`AgentState` objects and a
batched ``*_batch`` form operating on the structure-of-arrays environment.
The scalar forms are thin wrappers over the batched math so both paths
share one implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .geometry import UP, normalize
from .sim import AgentState, CageSpec, EnvState, Role, neighbor_mask, pairwise_distances

TASKS = ("circling", "circling_ccw", "alignment", "aggregation", "chasing", "cohesion", "feeding")


@dataclass(frozen=True)
class RewardConfig:
    w_style: float = 0.4
    w_bio: float = 0.1
    w_task: float = 0.5
    circle_w_dir: float = 10.0
    circle_w_speed: float = 10.0
    target_speed: float = 1.0
    align_weight: float = 1.0
    align_radius: float = 3.0
    align_cap: int = 10
    agg_a: float = 2.0
    agg_b: float = 1.0
    agg_weight: float = 1.0
    agg_radius: float = 5.0
    dom_weight: float = 8.0
    sub_weight: float = 1.0
    coh_weight: float = 5.0
    coh_radius: float = 3.0
    feed_reward: float = 10.0
    feed_eps: float = 0.01
    bio_w_separation: float = 0.4
    bio_w_boundary: float = 0.4
    bio_w_smooth: float = 0.2
    sep_near: float = 0.5
    sep_far: float = 1.0
    wall_near: float = 0.5
    wall_far: float = 1.5


# --------------------------------------------------------------------------- goals


@dataclass(frozen=True)
class Circling:
    target_dir: np.ndarray
    target_speed: float


@dataclass(frozen=True)
class Alignment:
    mean_dir: np.ndarray


@dataclass(frozen=True)
class Aggregation:
    center: np.ndarray


@dataclass(frozen=True)
class ChaseDom:
    dir: np.ndarray


@dataclass(frozen=True)
class ChaseSub:
    dir: np.ndarray


@dataclass(frozen=True)
class Cohesion:
    center: np.ndarray


@dataclass(frozen=True)
class Feeding:
    offset: np.ndarray


Goal = Union[Circling, Alignment, Aggregation, ChaseDom, ChaseSub, Cohesion, Feeding]


@dataclass(frozen=True)
class RewardBreakdown:
    r_style: float
    r_bio: float
    r_task: float
    total: float


# --------------------------------------------------------------------------- geometry shared by goals and rewards


def circling_direction(positions: np.ndarray, forwards: np.ndarray, center: np.ndarray,
                       clockwise: bool = True) -> np.ndarray:
    """Tangential target direction: vertical x (center - p), falling back to the current forward."""
    c = np.cross(np.broadcast_to(UP, positions.shape), center - positions)
    n = np.linalg.norm(c, axis=-1, keepdims=True)
    d = np.where(n > 1e-9, c / np.maximum(n, 1e-12), forwards)
    return d if clockwise else np.where(n > 1e-9, -d, forwards)


def neighborhood_centers(env: EnvState, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean neighbour position within ``radius``; agents without neighbours get their own position."""
    m = neighbor_mask(env, radius)
    counts = m.sum(axis=1)
    sums = m.astype(np.float64) @ env.positions
    centers = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], env.positions)
    return centers, counts


def neighborhood_headings(env: EnvState, radius: float) -> tuple[np.ndarray, np.ndarray]:
    m = neighbor_mask(env, radius)
    counts = m.sum(axis=1)
    mean = m.astype(np.float64) @ env.forwards
    n = np.linalg.norm(mean, axis=1, keepdims=True)
    heading = np.where((counts[:, None] > 0) & (n > 1e-9), mean / np.maximum(n, 1e-12), env.forwards)
    return heading, counts


def chase_directions(env: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Unit vector from the dominant to the subordinate of each agent's chase pair.

    Dominants pair with their nearest subordinate and vice versa. Returns the
    directions and a validity mask (False for normal agents, missing partners
    and coincident pairs).
    """
    n = env.n
    dist = pairwise_distances(env.positions)
    dom = (env.roles == Role.DOMINANT) & env.alive
    sub = (env.roles == Role.SUBORDINATE) & env.alive
    dirs = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    for mine, theirs, sign in ((dom, sub, 1.0), (sub, dom, -1.0)):
        if not theirs.any():
            continue
        d = np.where(theirs[None, :], dist, np.inf)
        partner = np.argmin(d, axis=1)
        for i in np.flatnonzero(mine):
            j = partner[i]
            v = sign * (env.positions[j] - env.positions[i])
            norm = np.linalg.norm(v)
            if norm > 1e-9:
                dirs[i] = v / norm
                valid[i] = True
    return dirs, valid


def nearest_food(env: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Index of the closest food item per agent (-1 when there is no food) and its distance."""
    if len(env.food) == 0:
        return np.full(env.n, -1), np.full(env.n, np.inf)
    d = np.linalg.norm(env.positions[:, None, :] - env.food[None, :, :], axis=-1)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(env.n), idx]


# --------------------------------------------------------------------------- batched rewards


def circling_reward_batch(forwards, speeds, target_dirs, target_speed, w_dir=10.0, w_speed=10.0):
    return w_dir * np.sum(target_dirs * forwards, axis=-1) - w_speed * (speeds - target_speed) ** 2


def alignment_reward_batch(forwards: np.ndarray, mask: np.ndarray, weight: float = 1.0) -> np.ndarray:
    cos = np.clip(forwards @ forwards.T, -1.0, 1.0)
    terms = 1.0 - np.arccos(cos) / math.pi
    return weight * np.sum(np.where(mask, terms, 0.0), axis=1)


def aggregation_reward_batch(dist: np.ndarray, a: float, b: float, w: float) -> np.ndarray:
    if a <= 0:
        raise ValueError("aggregation steepness a must be positive")
    return -w * dist / (1.0 + np.exp(-a * (dist - b)))


def bio_reward_batch(env: EnvState, actions_norm: np.ndarray, next_env: EnvState,
                     cfg: RewardConfig) -> np.ndarray:
    """Separation, wall-avoidance and smoothness penalties mapped to [0, 1].

    ``actions_norm`` are actions divided by their per-component bounds.
    """
    dist = pairwise_distances(next_env.positions)
    valid = next_env.alive[None, :] & next_env.alive[:, None]
    np.fill_diagonal(valid, False)
    nearest = np.min(np.where(valid, dist, np.inf), axis=1)
    sep = -np.clip((cfg.sep_far - nearest) / (cfg.sep_far - cfg.sep_near), 0.0, 1.0)
    face = next_env.cage.face_distance(next_env.positions)
    wall = -np.clip((cfg.wall_far - face) / (cfg.wall_far - cfg.wall_near), 0.0, 1.0)
    a = np.asarray(actions_norm, dtype=np.float64)
    smooth = -np.clip(0.5 * (a[:, 1] ** 2 + a[:, 2] ** 2), 0.0, 1.0)
    r = cfg.bio_w_separation * sep + cfg.bio_w_boundary * wall + cfg.bio_w_smooth * smooth
    return np.clip(r + 1.0, 0.0, 1.0)


def task_reward_batch(task: str, env: EnvState, cfg: RewardConfig) -> np.ndarray:
    """Raw (unnormalised) behaviour reward for every agent of ``env``."""
    if task in ("circling", "circling_ccw"):
        d = circling_direction(env.positions, env.forwards, env.cage.center, task == "circling")
        return circling_reward_batch(env.forwards, env.speeds, d, cfg.target_speed, cfg.circle_w_dir,
                                     cfg.circle_w_speed)
    if task == "alignment":
        return alignment_reward_batch(env.forwards, neighbor_mask(env, cfg.align_radius), cfg.align_weight)
    if task == "aggregation":
        centers, _ = neighborhood_centers(env, cfg.agg_radius)
        dist = np.linalg.norm(env.positions - centers, axis=1)
        return aggregation_reward_batch(dist, cfg.agg_a, cfg.agg_b, cfg.agg_weight)
    if task == "cohesion":
        centers, _ = neighborhood_centers(env, cfg.coh_radius)
        return -cfg.coh_weight * np.linalg.norm(env.positions - centers, axis=1)
    if task == "chasing":
        dirs, valid = chase_directions(env)
        proj = np.sum(dirs * env.velocities, axis=1)
        w = np.where(env.roles == Role.DOMINANT, cfg.dom_weight, cfg.sub_weight)
        return np.where(valid, w * proj, 0.0)
    if task == "feeding":
        _, dist = nearest_food(env)
        return np.where(dist < cfg.feed_eps, cfg.feed_reward, 0.0)
    raise ValueError(f"unknown task {task!r}")


def task_bounds(task: str, cfg: RewardConfig, cage: CageSpec, roles: np.ndarray | None = None):
    """Analytic (lo, hi) range of the raw task reward used to scale it into [0, 1]."""
    if task in ("circling", "circling_ccw"):
        # moving against the circle counts as zero success
        return 0.0, cfg.circle_w_dir
    if task == "alignment":
        return 0.0, cfg.align_weight * cfg.align_cap
    if task == "aggregation":
        return -cfg.agg_weight * cage.diagonal, 0.0
    if task == "cohesion":
        return -cfg.coh_weight * cage.diagonal, 0.0
    if task == "chasing":
        if roles is None:
            return -1.5 * cfg.dom_weight, 1.5 * cfg.dom_weight
        hi = np.where(roles == Role.DOMINANT, 1.5 * cfg.dom_weight, 1.5 * cfg.sub_weight)
        return -hi, hi
    if task == "feeding":
        return 0.0, cfg.feed_reward
    raise ValueError(f"unknown task {task!r}")


def normalize_task(raw, lo, hi):
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / (np.asarray(hi) - np.asarray(lo)), 0.0, 1.0)


def consume_food(env: EnvState, cfg: RewardConfig) -> EnvState:
    """Drop every food item that some agent touched this step."""
    if len(env.food) == 0:
        return env
    idx, dist = nearest_food(env)
    eaten = np.unique(idx[dist < cfg.feed_eps])
    if len(eaten) == 0:
        return env
    new = env.copy()
    new.food = np.delete(env.food, eaten, axis=0)
    return new


def total_reward_batch(r_style, r_bio, r_task, cfg: RewardConfig = RewardConfig()):
    return cfg.w_style * np.asarray(r_style) + cfg.w_bio * np.asarray(r_bio) + cfg.w_task * np.asarray(r_task)


# --------------------------------------------------------------------------- scalar forms


def circling_reward(state: AgentState, goal: Circling, w_dir: float = 10.0, w_speed: float = 10.0) -> float:
    return float(circling_reward_batch(state.forward, state.speed, np.asarray(goal.target_dir),
                                       goal.target_speed, w_dir, w_speed))


def alignment_reward(state: AgentState, neighbor_states: Sequence[AgentState], w_ali: float = 1.0) -> float:
    total = 0.0
    for other in neighbor_states:
        cos = float(np.clip(np.dot(state.forward, other.forward), -1.0, 1.0))
        total += (180.0 - math.degrees(math.acos(cos))) / 180.0
    return w_ali * total


def aggregation_reward(state: AgentState, center, a: float = 2.0, b: float = 1.0, w_agg: float = 1.0) -> float:
    dist = float(np.linalg.norm(state.position - np.asarray(center, dtype=np.float64)))
    return float(aggregation_reward_batch(np.float64(dist), a, b, w_agg))


def chase_rewards(dom: AgentState, sub: AgentState, w_dom: float = 8.0, w_sub: float = 1.0) -> tuple[float, float]:
    v = sub.position - dom.position
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        return 0.0, 0.0
    d = v / n
    return w_dom * float(np.dot(d, dom.velocity)), w_sub * float(np.dot(d, sub.velocity))


def cohesion_reward(state: AgentState, center, w_coh: float = 5.0) -> float:
    if center is None:
        return 0.0
    return -w_coh * float(np.linalg.norm(state.position - np.asarray(center, dtype=np.float64)))


def feeding_reward(state: AgentState, nearest_food, r_feed: float = 10.0, eps: float = 0.01) -> float:
    if nearest_food is None:
        return 0.0
    return r_feed if float(np.linalg.norm(state.position - np.asarray(nearest_food))) < eps else 0.0


def bio_reward(state: AgentState, action, next_state: AgentState, neighbor_states: Sequence[AgentState],
               cage: CageSpec, bounds=None, cfg: RewardConfig = RewardConfig()) -> float:
    """Scalar regulariser for one agent; ``neighbor_states`` are evaluated at time t+1."""
    from .sim import ActionBounds

    bounds = bounds or ActionBounds()
    a = action.as_array() if hasattr(action, "as_array") else np.asarray(action, dtype=np.float64)
    a_norm = a / bounds.as_array()
    if neighbor_states:
        nearest = min(float(np.linalg.norm(next_state.position - o.position)) for o in neighbor_states)
    else:
        nearest = math.inf
    sep = -min(max((cfg.sep_far - nearest) / (cfg.sep_far - cfg.sep_near), 0.0), 1.0)
    face = float(cage.face_distance(next_state.position))
    wall = -min(max((cfg.wall_far - face) / (cfg.wall_far - cfg.wall_near), 0.0), 1.0)
    smooth = -min(0.5 * (a_norm[1] ** 2 + a_norm[2] ** 2), 1.0)
    r = cfg.bio_w_separation * sep + cfg.bio_w_boundary * wall + cfg.bio_w_smooth * smooth
    return min(max(r + 1.0, 0.0), 1.0)


def goal_observation(task: str, env: EnvState, agent: int, cfg: RewardConfig = RewardConfig()) -> Goal:
    i = agent
    p = env.positions[i]
    if task in ("circling", "circling_ccw"):
        d = circling_direction(p[None], env.forwards[i][None], env.cage.center, task == "circling")[0]
        return Circling(d, cfg.target_speed)
    if task == "alignment":
        heading, _ = neighborhood_headings(env, cfg.align_radius)
        return Alignment(heading[i])
    if task == "aggregation":
        centers, _ = neighborhood_centers(env, cfg.agg_radius)
        return Aggregation(centers[i])
    if task == "cohesion":
        centers, _ = neighborhood_centers(env, cfg.coh_radius)
        return Cohesion(centers[i])
    if task == "chasing":
        dirs, _ = chase_directions(env)
        cls = ChaseDom if env.roles[i] == Role.DOMINANT else ChaseSub
        return cls(dirs[i])
    if task == "feeding":
        idx, _ = nearest_food(env)
        return Feeding(env.food[idx[i]] - p if idx[i] >= 0 else np.zeros(3))
    raise ValueError(f"unknown task {task!r}")


def goal_vectors(task: str, env: EnvState, cfg: RewardConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batched goal signal: a world-frame vector per agent plus one scalar channel.

    Directions are unit vectors; positional goals are offsets from the agent.
    """
    if task in ("circling", "circling_ccw"):
        d = circling_direction(env.positions, env.forwards, env.cage.center, task == "circling")
        return d, np.full(env.n, cfg.target_speed)
    if task == "alignment":
        heading, counts = neighborhood_headings(env, cfg.align_radius)
        return heading, np.minimum(counts, cfg.align_cap) / cfg.align_cap
    if task in ("aggregation", "cohesion"):
        radius = cfg.agg_radius if task == "aggregation" else cfg.coh_radius
        centers, counts = neighborhood_centers(env, radius)
        return centers - env.positions, (counts > 0).astype(np.float64)
    if task == "chasing":
        dirs, _ = chase_directions(env)
        sign = np.where(env.roles == Role.DOMINANT, 1.0, np.where(env.roles == Role.SUBORDINATE, -1.0, 0.0))
        return dirs, sign
    if task == "feeding":
        if len(env.food) == 0:
            return np.zeros((env.n, 3)), np.zeros(env.n)
        idx, _ = nearest_food(env)
        return env.food[idx] - env.positions, np.ones(env.n)
    raise ValueError(f"unknown task {task!r}")


def total_reward(r_style: float, r_bio: float, r_task_raw: float, task_normalizer, cfg: RewardConfig = RewardConfig()
                 ) -> RewardBreakdown:
    lo, hi = task_normalizer
    r_task = float(normalize_task(r_task_raw, lo, hi))
    total = cfg.w_style * r_style + cfg.w_bio * r_bio + cfg.w_task * r_task
    return RewardBreakdown(float(r_style), float(r_bio), r_task, float(total))


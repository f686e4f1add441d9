"""Scripted steering controllers that generate reference school behaviour."""
from __future__ import annotations

import enum

import numpy as np

from .geometry import normalize, to_body
from .rewards import RewardConfig, circling_direction, neighborhood_centers, neighborhood_headings
from .sim import EnvState


class Pattern(str, enum.Enum):
    CLOCKWISE_CIRCLE = "ClockwiseCircle"
    COUNTER_CLOCKWISE_CIRCLE = "CounterClockwiseCircle"
    ALIGN = "Align"
    AGGREGATE = "Aggregate"

    @classmethod
    def parse(cls, value) -> "Pattern":
        if isinstance(value, Pattern):
            return value
        for p in cls:
            if value in (p.value, p.name, p.name.lower(), p.value.lower()):
                return p
        raise ValueError(f"unsupported pattern {value!r}; expected one of {[p.value for p in cls]}")


def steer_towards(env: EnvState, desired: np.ndarray, target_speed, gain: float = 1.0) -> np.ndarray:
    """Actions (delta_speed, delta_yaw, delta_pitch) turning each agent toward ``desired``.

    Body frame: +x forward, +y up, +z starboard; positive yaw turns x toward z.
    """
    local = to_body(env.rotations, desired)
    yaw_err = np.arctan2(local[:, 2], local[:, 0])
    pitch_err = np.arctan2(local[:, 1], np.hypot(local[:, 0], local[:, 2]))
    b = env.config.bounds
    acts = np.stack(
        [
            np.clip(np.asarray(target_speed) - env.speeds, -b.delta_speed, b.delta_speed),
            np.clip(gain * yaw_err, -b.delta_yaw, b.delta_yaw),
            np.clip(gain * pitch_err, -b.delta_pitch, b.delta_pitch),
        ],
        axis=1,
    )
    return acts


def _avoidance(env: EnvState, wall_range: float = 1.5, sep_range: float = 1.0) -> np.ndarray:
    half = env.cage.half_extents
    p = env.positions
    push = np.zeros_like(p)
    # inward push grows linearly as a face gets closer than wall_range
    push += np.clip((wall_range - (half - p)) / wall_range, 0.0, None) * -1.0
    push += np.clip((wall_range - (half + p)) / wall_range, 0.0, None)
    diff = p[:, None, :] - p[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    close = (dist < sep_range) & env.alive[None, :]
    w = np.where(close, (sep_range - dist) / sep_range, 0.0)
    push += np.sum(w[:, :, None] * diff / np.maximum(dist, 1e-9)[:, :, None], axis=1)
    return 3.0 * push


def scripted_reference_controller(env: EnvState, pattern, cfg: RewardConfig = RewardConfig(),
                                  avoid: bool = True) -> np.ndarray:
    """One action row per alive agent steering the school toward ``pattern``."""
    pattern = Pattern.parse(pattern)
    if pattern in (Pattern.CLOCKWISE_CIRCLE, Pattern.COUNTER_CLOCKWISE_CIRCLE):
        desired = circling_direction(env.positions, env.forwards, env.cage.center,
                                     pattern is Pattern.CLOCKWISE_CIRCLE)
    elif pattern is Pattern.ALIGN:
        desired, _ = neighborhood_headings(env, cfg.align_radius)
    else:
        centers, counts = neighborhood_centers(env, cfg.agg_radius)
        offset = centers - env.positions
        desired = np.where(counts[:, None] > 0, normalize(offset), env.forwards)
        # inside the comfortable radius just keep going
        near = np.linalg.norm(offset, axis=1) < cfg.agg_b
        desired = np.where(near[:, None], env.forwards, desired)
    if avoid:
        desired = normalize(desired + _avoidance(env))
    acts = steer_towards(env, desired, cfg.target_speed)
    return acts[env.alive]

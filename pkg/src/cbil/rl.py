"""Shared-policy PPO pieces: observations, Gaussian policy, value net, GAE and the clipped update."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import to_body
from .rewards import RewardConfig, goal_vectors
from .sim import EnvState

log = logging.getLogger(__name__)

N_NEIGHBORS = 8
OWN_DIM = 7
NEIGHBOR_DIM = 7
GOAL_DIM = 4
OBS_DIM = OWN_DIM + N_NEIGHBORS * NEIGHBOR_DIM + GOAL_DIM
ACTION_DIM = 3
NEIGHBOR_SCALE = 3.0  # m, relative offsets are divided by this


def build_observations(env: EnvState, task: str, cfg: RewardConfig = RewardConfig(),
                       k: int = N_NEIGHBORS) -> np.ndarray:
    """Fixed-width observation rows for every agent.

    Own block: position / half extents, world forward, centred speed.
    Neighbour block: K nearest alive agents as body-frame offset, body-frame
    heading and speed (zero padded). Goal block: body-frame goal vector and
    one scalar channel.
    """
    n = env.n
    half = env.cage.half_extents
    mid, span = 0.5 * (env.config.speed_min + env.config.speed_max), 0.5 * (env.config.speed_max - env.config.speed_min)
    own = np.concatenate([env.positions / half, env.forwards, ((env.speeds - mid) / span)[:, None]], axis=1)

    diff = env.positions[None, :, :] - env.positions[:, None, :]
    dist = np.linalg.norm(diff, axis=-1)
    dist = np.where(env.alive[None, :], dist, np.inf)
    np.fill_diagonal(dist, np.inf)
    kk = min(k, n - 1)
    nb = np.zeros((n, k, NEIGHBOR_DIM))
    if kk > 0:
        order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        rows = np.arange(n)[:, None]
        valid = np.isfinite(dist[rows, order])
        rel = to_body(np.repeat(env.rotations, kk, axis=0), diff[rows, order].reshape(-1, 3)).reshape(n, kk, 3)
        head = to_body(np.repeat(env.rotations, kk, axis=0), env.forwards[order].reshape(-1, 3)).reshape(n, kk, 3)
        spd = ((env.speeds[order] - mid) / span)[..., None]
        block = np.concatenate([rel / NEIGHBOR_SCALE, head, spd], axis=-1)
        nb[:, :kk] = np.where(valid[..., None], block, 0.0)

    gvec, gscal = goal_vectors(task, env, cfg)
    goal = np.concatenate([to_body(env.rotations, gvec), gscal[:, None]], axis=1)
    return np.concatenate([own, nb.reshape(n, -1), goal], axis=1)


def mlp(sizes, activation=nn.Tanh) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), activation()]
    layers.append(nn.Linear(sizes[-2], sizes[-1]))
    return nn.Sequential(*layers)


class GaussianPolicy(nn.Module):
    """Mean network with a fixed diagonal log-std; actions live in bound-normalised units."""

    def __init__(self, obs_dim: int = OBS_DIM, hidden=(1024, 1024, 1024, 512), act_dim: int = ACTION_DIM,
                 log_std: float = -1.0, learn_std: bool = False, out_scale: float = 0.01):
        super().__init__()
        self.net = mlp([obs_dim, *hidden, act_dim])
        with torch.no_grad():
            self.net[-1].weight.mul_(out_scale)
            self.net[-1].bias.zero_()
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std)), requires_grad=learn_std)

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean = self.net(obs)
        return mean, self.log_std.expand_as(mean)

    def log_prob(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        mean, log_std = self(obs)
        return gaussian_log_prob(act, mean, log_std)

    def entropy(self, obs: torch.Tensor) -> torch.Tensor:
        _, log_std = self(obs)
        return torch.sum(log_std + 0.5 * math.log(2 * math.pi * math.e), dim=-1)


class ValueNet(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, hidden=(128, 128, 128, 128)):
        super().__init__()
        self.net = mlp([obs_dim, *hidden, 1])

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs).squeeze(-1)


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * torch.exp(-log_std)
    return torch.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi), dim=-1)


def policy_forward(policy: GaussianPolicy, obs) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        mean, log_std = policy(torch.as_tensor(np.asarray(obs), dtype=torch.float32))
    return mean.double().numpy(), log_std.double().numpy()


def sample_action(mean, log_std, rng: np.random.Generator | None, deterministic: bool = False,
                  clip: float = 1.0):
    """Diagonal Gaussian draw: (clamped action, raw sample, log-prob of the raw sample)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), mean.shape)
    if deterministic:
        raw = mean.copy()
    else:
        raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    z = (raw - mean) * np.exp(-log_std)
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2 * np.pi), axis=-1)
    return np.clip(raw, -clip, clip), raw, logp


def compute_gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.99):
    """Advantages and returns; leading axis is time, values carry one extra bootstrap row."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1 or d.shape != r.shape or v.shape[1:] != r.shape[1:]:
        raise ValueError(f"inconsistent lengths: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + v[:-1]


@dataclass(frozen=True)
class PPOConfig:
    eps_clip: float = 0.2
    lr_policy: float = 3e-4
    lr_value: float = 3e-4
    epochs: int = 10
    minibatch: int = 1000
    entropy_coef: float = 5e-3
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    target_kl: float | None = 0.02
    ratio_band: tuple = (0.5, 2.0)


def ppo_update(policy: nn.Module, value: nn.Module, opt_pi, opt_v, batch: dict, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO epochs over shuffled minibatches.

    ``batch`` maps obs, act, logp, adv, ret to aligned tensors. Advantages
    are standardised here over the whole batch.
    """
    obs, act, logp_old = batch["obs"], batch["act"], batch["logp"]
    adv = batch["adv"]
    std = adv.std() if len(adv) > 1 else torch.ones(())
    adv = (adv - adv.mean()) / (std + 1e-8)
    ret = batch["ret"]
    n = len(obs)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "ratio_min": np.inf, "ratio_max": -np.inf,
             "ratio_mean_min": np.inf, "ratio_mean_max": -np.inf, "clip_frac": 0.0, "band_violations": 0,
             "approx_kl": 0.0, "epochs_run": 0}
    count = 0
    for _ in range(cfg.epochs):
        if cfg.target_kl is not None and stats["approx_kl"] > 1.5 * cfg.target_kl:
            break
        stats["epochs_run"] += 1
        perm = torch.as_tensor(rng.permutation(n))
        for b0 in range(0, n, cfg.minibatch):
            idx = perm[b0:b0 + cfg.minibatch]
            logp = policy.log_prob(obs[idx], act[idx])
            ratio = torch.exp(logp - logp_old[idx])
            a = adv[idx]
            surr = torch.min(ratio * a, torch.clamp(ratio, 1 - cfg.eps_clip, 1 + cfg.eps_clip) * a)
            loss_pi = -surr.mean() - cfg.entropy_coef * policy.entropy(obs[idx]).mean()
            opt_pi.zero_grad()
            loss_pi.backward()
            if cfg.max_grad_norm:
                nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            opt_pi.step()

            loss_v = cfg.value_coef * torch.mean((value(obs[idx]) - ret[idx]) ** 2)
            opt_v.zero_grad()
            loss_v.backward()
            if cfg.max_grad_norm:
                nn.utils.clip_grad_norm_(value.parameters(), cfg.max_grad_norm)
            opt_v.step()

            r = ratio.detach()
            stats["ratio_min"] = min(stats["ratio_min"], float(r.min()))
            stats["ratio_max"] = max(stats["ratio_max"], float(r.max()))
            mean_r = float(r.mean())
            stats["ratio_mean_min"] = min(stats["ratio_mean_min"], mean_r)
            stats["ratio_mean_max"] = max(stats["ratio_mean_max"], mean_r)
            stats["clip_frac"] += float(((r - 1).abs() > cfg.eps_clip).float().mean())
            # k3 estimator of KL(old || new) on this minibatch
            log_r = logp.detach() - logp_old[idx]
            stats["approx_kl"] = float(torch.mean(torch.exp(log_r) - 1.0 - log_r))
            if not cfg.ratio_band[0] <= mean_r <= cfg.ratio_band[1]:
                stats["band_violations"] += 1
                log.warning("PPO minibatch mean ratio %.3f outside %s", mean_r, cfg.ratio_band)
            stats["policy_loss"] += loss_pi.item()
            stats["value_loss"] += loss_v.item()
            count += 1
    for key in ("policy_loss", "value_loss", "clip_frac"):
        stats[key] /= max(count, 1)
    return stats

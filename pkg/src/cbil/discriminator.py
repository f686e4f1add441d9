"""Transition discriminator over latent pairs (z, z') and the cluster-weighted style reward."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .cluster import ClusterModel, assign_clusters

P_CLAMP = 1e-4
ARG_CLAMP = 1e-4


@dataclass(frozen=True)
class DiscConfig:
    latent_dim: int = 100
    hidden: tuple = (128, 32)
    lr: float = 2e-4
    w_gp: float = 5.0
    batch_size: int = 256
    updates_per_iter: int = 10
    buffer_capacity: int = 1_000_000


class Discriminator(nn.Module):
    """Fully connected stack 2J -> 128 -> 32 -> 1 with tanh everywhere."""

    def __init__(self, latent_dim: int = 100, hidden=(128, 32)):
        super().__init__()
        dims = [2 * latent_dim, *hidden]
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.hidden:
            x = torch.tanh(lin(x))
        return torch.tanh(self.out(x)).squeeze(-1)


def pair_input(z, z_next) -> np.ndarray:
    z, z_next = np.atleast_2d(z), np.atleast_2d(z_next)
    if z.shape != z_next.shape:
        raise ValueError("z and z_next must have the same shape")
    return np.concatenate([z, z_next], axis=1)


def _as_tensor(disc: nn.Module, x) -> torch.Tensor:
    dtype = next(disc.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def disc_forward(disc: Discriminator, z, z_next) -> np.ndarray:
    """Scores in [-1, 1] for a batch (or a single pair) of transitions."""
    with torch.no_grad():
        return disc(_as_tensor(disc, pair_input(z, z_next))).double().numpy()


def to_probability(score: torch.Tensor) -> torch.Tensor:
    return torch.clamp(0.5 * (score + 1.0), P_CLAMP, 1.0 - P_CLAMP)


def gradient_penalty(score_fn: Callable[[torch.Tensor], torch.Tensor], ref: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 norm of d score / d input over the reference batch (differentiable)."""
    if len(ref) == 0:
        raise ValueError("gradient penalty needs a non-empty batch")
    # the penalty needs an input gradient even when called under no_grad (finite-difference checks)
    with torch.enable_grad():
        x = ref.detach().clone().requires_grad_(True)
        s = score_fn(x)
        if not s.requires_grad:
            return torch.zeros((), dtype=ref.dtype)
        (g,) = torch.autograd.grad(s.sum(), x, create_graph=True, allow_unused=True)
    if g is None:
        return torch.zeros((), dtype=ref.dtype)
    return torch.mean(torch.sum(g * g, dim=-1))


def disc_loss(disc: nn.Module, ref: torch.Tensor, pol: torch.Tensor, w_gp: float) -> tuple[torch.Tensor, dict]:
    if len(ref) == 0 or len(pol) == 0:
        raise ValueError("discriminator loss needs non-empty batches")
    s_ref, s_pol = disc(ref), disc(pol)
    gp = gradient_penalty(disc, ref) if w_gp else torch.zeros((), dtype=ref.dtype)
    loss = -torch.log(to_probability(s_ref)).mean() - torch.log(1.0 - to_probability(s_pol)).mean() + w_gp * gp
    stats = {"disc_loss": loss.item(), "gp": gp.item(),
             "score_ref": s_ref.mean().item(), "score_pol": s_pol.mean().item()}
    return loss, stats


def style_reward_from_prob(d_hat, w_i, w_sum=1.0):
    """Cluster-weighted reward: -log(1 - W_i D / sum W) squashed by 2 / (1 + exp(.))."""
    arg = np.clip(1.0 - np.asarray(w_i) * np.asarray(d_hat) / w_sum, ARG_CLAMP, 1.0)
    raw = -np.log(arg)
    return np.clip(2.0 / (1.0 + np.exp(raw)), 0.0, 1.0)


class PairStandardizer:
    """Fixed per-dimension affine map of transition pairs, fitted on the reference set."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, pairs, floor: float = 1e-8) -> "PairStandardizer":
        pairs = np.asarray(pairs, dtype=np.float64)
        return cls(pairs.mean(axis=0), np.maximum(pairs.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> "PairStandardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, pairs) -> np.ndarray:
        return (np.asarray(pairs, dtype=np.float64) - self.mean) / self.std


def style_reward(disc: Discriminator, model: ClusterModel, z, z_next,
                 standardize: PairStandardizer | None = None) -> np.ndarray:
    """Per-pair style reward; clusters come from raw ``z``, the discriminator sees standardised pairs."""
    z2 = np.atleast_2d(z)
    clusters = assign_clusters(model, z2)
    x = pair_input(z2, z_next)
    if standardize is not None:
        x = standardize(x)
    j = x.shape[1] // 2
    d_hat = np.clip(0.5 * (disc_forward(disc, x[:, :j], x[:, j:]) + 1.0), 0.0, 1.0)
    return style_reward_from_prob(d_hat, model.weights[clusters], float(model.weights.sum()))


class ReplayBuffer:
    """Ring buffer of policy transition pairs with uniform sampling; storage grows on demand."""

    def __init__(self, dim: int, capacity: int = 1_000_000):
        self.dim, self.capacity = dim, capacity
        self.data = np.zeros((0, dim), dtype=np.float32)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.float32).reshape(-1, self.dim)
        if len(rows) >= self.capacity:
            rows = rows[-self.capacity:]
        need = min(self.capacity, self.size + len(rows))
        if need > len(self.data):
            grown = np.zeros((min(self.capacity, max(need, 2 * len(self.data))), self.dim), dtype=np.float32)
            grown[: len(self.data)] = self.data
            self.data = grown
        for r0 in range(0, len(rows), self.capacity):
            chunk = rows[r0:r0 + self.capacity]
            idx = (self.head + np.arange(len(chunk))) % self.capacity
            self.data[idx] = chunk
            self.head = int((self.head + len(chunk)) % self.capacity)
            self.size = min(self.capacity, self.size + len(chunk))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        return self.data[rng.integers(self.size, size=n)]

    def state(self) -> np.ndarray:
        """Contents in insertion order (oldest first)."""
        if self.size < self.capacity:
            return self.data[: self.size].copy()
        return np.roll(self.data, -self.head, axis=0).copy()


def update_discriminator(disc: Discriminator, opt: torch.optim.Optimizer, ref, pol, w_gp: float) -> dict:
    """One optimiser step on the discriminator loss."""
    loss, stats = disc_loss(disc, _as_tensor(disc, ref), _as_tensor(disc, pol), w_gp)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return stats

"""Masked video autoencoder mapping 10-frame silhouette clips to 100-d latents.

Clips are cut into (frame, patch-row, patch-col) tokens. A pre-norm
transformer encoder pools them into the mean / log-variance of a diagonal
Gaussian; the decoder broadcasts the latent over a learned token grid and
predicts every pixel through a sigmoid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .observation import CLIP_LEN, Clip, MaskedClip, clip_mask_rng, mask_clip

log = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)


@dataclass(frozen=True)
class MvaeConfig:
    height: int = 64
    width: int = 64
    patch_size: int = 8
    token_patch: int | None = None  # tokenizer patch; defaults to the masking patch
    model_dim: int = 128
    depth: int = 4
    heads: int = 4
    decoder_depth: int = 2
    mlp_ratio: int = 4
    latent_dim: int = 100
    mask_ratio: float = 0.5
    beta: float = 0.5
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("frame size must be divisible by patch_size")
        if self.height % self.tokens_side or self.width % self.tokens_side:
            raise ValueError("frame size must be divisible by token_patch")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def tokens_side(self) -> int:
        return self.token_patch or self.patch_size


@dataclass(frozen=True)
class MvaeLosses:
    recon: float
    kl: float
    total: float


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MVAE(nn.Module):
    def __init__(self, cfg: MvaeConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.tokens_side
        self.grid = (CLIP_LEN, cfg.height // p, cfg.width // p)
        n_space = self.grid[1] * self.grid[2]
        d = cfg.model_dim
        self.patch_embed = nn.Linear(p * p, d)
        self.pos_space = nn.Parameter(0.02 * torch.randn(n_space, d))
        self.pos_time = nn.Parameter(0.02 * torch.randn(CLIP_LEN, d))
        self.encoder = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.enc_norm = nn.LayerNorm(d)
        self.mu_head = nn.Linear(d, cfg.latent_dim)
        self.logvar_head = nn.Linear(d, cfg.latent_dim)
        self.latent_in = nn.Linear(cfg.latent_dim, d)
        self.mask_token = nn.Parameter(0.02 * torch.randn(d))
        self.dec_pos_space = nn.Parameter(0.02 * torch.randn(n_space, d))
        self.dec_pos_time = nn.Parameter(0.02 * torch.randn(CLIP_LEN, d))
        self.decoder = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)])
        self.dec_norm = nn.LayerNorm(d)
        self.pixels = nn.Linear(d, p * p)

    def _pos(self, space: torch.Tensor, time: torch.Tensor) -> torch.Tensor:
        return (time[:, None, :] + space[None, :, :]).reshape(-1, space.shape[-1])

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        b = frames.shape[0]
        t, nh, nw = self.grid
        p = self.cfg.tokens_side
        x = frames.reshape(b, t, nh, p, nw, p).permute(0, 1, 2, 4, 3, 5)
        return x.reshape(b, t * nh * nw, p * p)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        t, nh, nw = self.grid
        p = self.cfg.tokens_side
        x = tokens.reshape(b, t, nh, nw, p, p).permute(0, 1, 2, 4, 3, 5)
        return x.reshape(b, t, nh * p, nw * p)

    def encode_heads(self, visible: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.patch_embed(self.patchify(visible)) + self._pos(self.pos_space, self.pos_time)
        for blk in self.encoder:
            x = blk(x)
        h = self.enc_norm(x).mean(dim=1)
        logvar = torch.clamp(self.logvar_head(h), *LOGVAR_RANGE)
        return self.mu_head(h), logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        n = self.grid[0] * self.grid[1] * self.grid[2]
        x = self.mask_token + self.latent_in(z)[:, None, :].expand(-1, n, -1)
        x = x + self._pos(self.dec_pos_space, self.dec_pos_time)
        for blk in self.decoder:
            x = blk(x)
        return self.unpatchify(torch.sigmoid(self.pixels(self.dec_norm(x))))

    def forward(self, visible: torch.Tensor, eps: torch.Tensor | None = None):
        mu, logvar = self.encode_heads(visible)
        z = mu if eps is None else mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar, z


def loss_terms(recon: torch.Tensor, target: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor, beta: float):
    """(recon, kl, total): pixel-mean squared error plus beta times the per-sample KL."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rec = torch.mean((recon - target) ** 2)
    kl = 0.5 * torch.sum(mu**2 + torch.exp(logvar) - logvar - 1.0, dim=-1).mean()
    return rec, kl, rec + beta * kl


def _check_shape(model: MVAE, frames: np.ndarray) -> None:
    want = (CLIP_LEN, model.cfg.height, model.cfg.width)
    if tuple(frames.shape[-3:]) != want:
        raise ValueError(f"clip shape {tuple(frames.shape[-3:])} does not match model input {want}")


def _tensor(model: MVAE, arr) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


def encode(model: MVAE, masked: MaskedClip, mode: str = "mean", rng: np.random.Generator | None = None):
    """Return (mu, logvar, z) as numpy vectors; ``mode`` is "mean" or "sample"."""
    frames = masked.visible_frames()
    _check_shape(model, frames)
    with torch.no_grad():
        mu, logvar = model.encode_heads(_tensor(model, frames[None]))
    mu, logvar = mu[0].double().numpy(), logvar[0].double().numpy()
    if mode == "mean":
        return mu, logvar, mu.copy()
    if mode != "sample":
        raise ValueError(f"unknown encode mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    return mu, logvar, mu + np.exp(0.5 * logvar) * rng.standard_normal(len(mu))


def decode(model: MVAE, z, target_shape=None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.cfg.latent_dim:
        raise ValueError(f"latent has {z.shape[-1]} dims, model expects {model.cfg.latent_dim}")
    expected = (CLIP_LEN, model.cfg.height, model.cfg.width)
    if target_shape is not None and tuple(target_shape) != expected:
        raise ValueError(f"target shape {tuple(target_shape)} does not match decoder output {expected}")
    with torch.no_grad():
        out = model.decode(_tensor(model, z.reshape(1, -1)))
    return out[0].double().numpy()


def loss(model: MVAE, masked: MaskedClip, target: Clip, beta: float = 0.5,
         eps: np.ndarray | None = None) -> MvaeLosses:
    """Eval-mode losses; decoding uses ``mu + sigma * eps`` when ``eps`` is given, else ``mu``."""
    frames = masked.visible_frames()
    _check_shape(model, frames)
    with torch.no_grad():
        e = None if eps is None else _tensor(model, np.asarray(eps)[None])
        recon, mu, logvar, _ = model(_tensor(model, frames[None]), e)
        rec, kl, total = loss_terms(recon, _tensor(model, target.frames[None]), mu, logvar, beta)
    return MvaeLosses(float(rec), float(kl), float(total))


def _batch_frames(clips: Sequence[Clip], idx, epoch: int, cfg: MvaeConfig) -> tuple[np.ndarray, np.ndarray]:
    vis, tgt = [], []
    for i in idx:
        m = mask_clip(clips[i], cfg.patch_size, cfg.mask_ratio, clip_mask_rng(cfg.seed, epoch, int(i)))
        vis.append(m.visible_frames())
        tgt.append(clips[i].frames)
    return np.stack(vis).astype(np.float32), np.stack(tgt).astype(np.float32)


def train_mvae(dataset: Sequence[Clip], cfg: MvaeConfig, epochs: int | None = None,
               curve: list | None = None) -> MVAE:
    """Minimise recon + beta*KL with Adam; masks are re-drawn every epoch.

    ``curve`` (if given) receives one dict per epoch with recon, kl and total.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train the MVAE on an empty dataset")
    for c in dataset:
        _check_shape_cfg(cfg, c.frames)
    torch.manual_seed(cfg.seed)
    model = MVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, 7])
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(dataset)
    for epoch in range(epochs if epochs is not None else cfg.epochs):
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            vis, tgt = _batch_frames(dataset, idx, epoch, cfg)
            vis_t, tgt_t = torch.from_numpy(vis), torch.from_numpy(tgt)
            mu, logvar = model.encode_heads(vis_t)
            eps = torch.randn(mu.shape, generator=gen)
            recon = model.decode(mu + torch.exp(0.5 * logvar) * eps)
            rec, kl, total = loss_terms(recon, tgt_t, mu, logvar, cfg.beta)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([rec.item(), kl.item(), total.item()])
        row = {"epoch": epoch, "recon": sums[0] / n, "kl": sums[1] / n, "total": sums[2] / n}
        if curve is not None:
            curve.append(row)
        log.debug("mvae epoch %d recon %.5f kl %.4f total %.5f", epoch, row["recon"], row["kl"], row["total"])
    freeze(model)
    return model


def _check_shape_cfg(cfg: MvaeConfig, frames: np.ndarray) -> None:
    want = (CLIP_LEN, cfg.height, cfg.width)
    if tuple(frames.shape) != want:
        raise ValueError(f"clip shape {tuple(frames.shape)} does not match configured input {want}")


def freeze(model: MVAE) -> MVAE:
    model.eval()
    for prm in model.parameters():
        prm.requires_grad_(False)
    return model


def encode_frames(model: MVAE, frames: np.ndarray, batch: int = 32) -> np.ndarray:
    """Mean-mode latents for a stack of unmasked clips, shape (N, T, H, W) -> (N, J)."""
    out = []
    with torch.no_grad():
        for b0 in range(0, len(frames), batch):
            mu, _ = model.encode_heads(_tensor(model, frames[b0:b0 + batch]))
            out.append(mu.double().numpy())
    if not out:
        return np.zeros((0, model.cfg.latent_dim))
    return np.concatenate(out)


def encode_stream(model: MVAE, clips: Sequence[Clip]) -> list[np.ndarray]:
    """Mean-mode latents of full (unmasked) clips, order preserved."""
    if len(clips) == 0:
        return []
    frames = np.stack([c.frames for c in clips])
    _check_shape(model, frames)
    return list(encode_frames(model, frames))


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,recon,kl,total\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['recon']:.9g},{row['kl']:.9g},{row['total']:.9g}\n")

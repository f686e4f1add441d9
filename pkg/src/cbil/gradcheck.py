"""Central finite-difference checks for torch modules and input gradients."""
from __future__ import annotations

from typing import Callable

import torch


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    scale = max(float(a.norm()), float(b.norm()))
    return 0.0 if scale == 0.0 else float((a - b).norm()) / scale


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(fn())
            flat[i] = old - h
            down = float(fn())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def check_module(loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module, h: float = 1e-4) -> dict:
    """Relative error of analytic vs numeric gradient for each trainable tensor of ``module``."""
    module.zero_grad()
    loss_fn().backward()
    out = {}
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        out[name] = rel_error(analytic, numeric_grad(loss_fn, p, h))
    return out


def check_input(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-4) -> float:
    """Relative error of d fn(x).sum() / dx against central differences."""
    xa = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(xa).sum(), xa)
    xn = x.detach().clone()
    return rel_error(g, numeric_grad(lambda: fn(xn).sum(), xn, h))

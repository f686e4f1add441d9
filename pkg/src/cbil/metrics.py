"""Evaluation metrics: Frechet distance, cluster-histogram JS divergence, APD and task return."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import ClusterModel, assign_clusters, reduce, write_reduced_csv

PSD_TOL = 1e-8


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min(initial=0.0) < -PSD_TOL * max(1.0, abs(w).max(initial=0.0)):
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("feature dimensions differ")
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    d = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    # round-off can push identical distributions a hair below zero
    return float(max(d, 0.0))


def fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two (N, F) feature sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per set")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def js_from_histograms(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(x, y):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / y[nz])))

    return min(1.0, max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m)))


def cluster_histogram(model: ClusterModel, latents, smoothing: float = 1.0) -> np.ndarray:
    labels = assign_clusters(model, latents)
    return np.bincount(labels, minlength=model.k) + smoothing


def js_divergence(a, b, model: ClusterModel, smoothing: float = 1.0) -> float:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("JS divergence needs non-empty latent sets")
    return js_from_histograms(cluster_histogram(model, a, smoothing), cluster_histogram(model, b, smoothing))


def state_features(positions, forwards, speeds) -> np.ndarray:
    """Per-frame 7-vector (position, forward, speed)."""
    return np.concatenate([np.asarray(positions), np.asarray(forwards), np.asarray(speeds)[..., None]], axis=-1)


def apd(clips) -> float:
    """Mean over ordered pairs of sqrt(sum over frames of the per-frame state distance)."""
    x = [np.asarray(c, dtype=np.float64) for c in clips]
    if len(x) < 2:
        raise ValueError("APD needs at least two clips")
    if any(c.shape != x[0].shape for c in x):
        raise ValueError("all clips must have the same length and state size")
    x = np.stack(x)
    x = x.reshape(x.shape[0], x.shape[1], -1)
    n = len(x)
    total = 0.0
    for i in range(n):
        per_frame = np.linalg.norm(x[i][None] - x, axis=-1)
        total += float(np.sum(np.sqrt(per_frame.sum(axis=1))))
    return total / (n * (n - 1))


def task_return(r_task, dones) -> tuple[float, float]:
    """Per-episode mean of normalised task reward, then mean and std over episodes.

    ``r_task`` and ``dones`` are (T, N); each agent slot is split into
    episodes at its done flags, and the trailing partial episode counts.
    """
    r = np.asarray(r_task, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if r.size == 0:
        raise ValueError("empty rollout")
    if r.ndim == 1:
        r, d = r[:, None], d[:, None]
    scores = []
    for j in range(r.shape[1]):
        start = 0
        for t in range(r.shape[0]):
            if d[t, j] or t == r.shape[0] - 1:
                scores.append(r[start:t + 1, j].mean())
                start = t + 1
    s = np.array(scores)
    return float(s.mean()), float(s.std())


def export_embedding(path, latents, labels, method: str = "pca", seed: int = 0) -> np.ndarray:
    pts = reduce(np.asarray(latents, dtype=np.float64), method, seed).points
    write_reduced_csv(path, pts, labels)
    return pts


@dataclass
class MetricReport:
    fid: float | None = None
    js: float | None = None
    apd_mean: float | None = None
    apd_std: float | None = None
    task_return_mean: float | None = None
    task_return_std: float | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

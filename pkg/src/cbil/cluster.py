"""Reference latent clustering: 2-d reduction, k-means, elbow selection and frequency weights."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

K_RANGE = (1, 10)
TSNE_MAX_POINTS = 5000


@dataclass(frozen=True)
class ReducedPoints:
    points: np.ndarray  # (N, 2)
    method: str
    perplexity: float | None = None


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray  # (K, dim of clustering space)
    weights: np.ndarray  # (K,)
    anchors: np.ndarray  # (N, J) reference latents, stream order
    labels: np.ndarray  # (N,)
    method: str = "tsne"
    reduced: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not K_RANGE[0] <= self.k <= K_RANGE[1]:
            raise ValueError(f"K={self.k} outside {K_RANGE}")
        if len(self.weights) != self.k or np.any(self.weights <= 0):
            raise ValueError("cluster weights must be K positive numbers")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("cluster weights must sum to 1")

    @classmethod
    def uniform(cls, anchors) -> "ClusterModel":
        """Single cluster holding every anchor (the no-clustering ablation)."""
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        return cls(1, anchors.mean(axis=0, keepdims=True), np.ones(1), anchors,
                   np.zeros(len(anchors), dtype=np.int64), method="none")

    def to_json(self) -> dict:
        return {"K": int(self.k), "weights": self.weights.tolist(),
                "centers": np.asarray(self.centers).tolist(), "anchor_count": int(len(self.anchors))}


# ---------------------------------------------------------------- reduction

def pca_2d(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # fix component signs so the output does not depend on LAPACK sign choices
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities calibrated by bisection on the precision."""
    n = len(d2)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            s = w.sum()
            h = np.log(s) + beta * np.sum(di * w) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        p[i, np.arange(n) != i] = w / s
    return p


def tsne(x: np.ndarray, perplexity: float = 30.0, n_iter: int = 1000, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, learning_rate: float = 200.0, seed: int = 0) -> np.ndarray:
    """Exact t-SNE with momentum and per-coordinate gains."""
    n = len(x)
    # perplexity must leave room for the neighbourhood; shrink it on tiny inputs
    perplexity = min(perplexity, (n - 1) / 3.0)
    p = _conditional_p(_sq_dists(x), perplexity)
    p = (p + p.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        ex = exaggeration if it < exaggeration_iters else 1.0
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (ex * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        mom = 0.5 if it < exaggeration_iters else 0.8
        gains = np.where(np.sign(grad) != np.sign(vel), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        vel = mom * vel - learning_rate * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
    return y


def reduce(latents, method: str = "tsne", seed: int = 0, perplexity: float = 30.0) -> ReducedPoints:
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("latents must be a 2-d array (N, J)")
    n = len(x)
    if method == "pca":
        if n < 1:
            raise ValueError("PCA needs at least one point")
        return ReducedPoints(pca_2d(x), "pca")
    if method != "tsne":
        raise ValueError(f"unknown reduction {method!r}")
    if n < 5:
        raise ValueError(f"t-SNE needs at least 5 points, got {n}")
    if n > TSNE_MAX_POINTS:
        raise ValueError(f"exact t-SNE is limited to {TSNE_MAX_POINTS} points, got {n}")
    return ReducedPoints(tsne(x, perplexity=perplexity, seed=seed), "tsne", perplexity)


# ------------------------------------------------------------------ k-means

def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    d = np.maximum(d, 0.0)
    a = np.argmin(d, axis=1)
    return a, d[np.arange(len(x)), a]


def _sse(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum((x - centers[assign]) ** 2))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Lloyd iterations; asserts the SSE never increases between iterations."""
    k = len(centers)
    centers = centers.copy()
    assign, _ = _assign(x, centers)
    prev = np.inf
    for _ in range(max_iter):
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        # empty clusters restart at the point worst served by its center
        for c in range(k):
            if not np.any(assign == c):
                far = int(np.argmax(np.sum((x - centers[assign]) ** 2, axis=1)))
                centers[c] = x[far]
                assign[far] = c
        new_assign, _ = _assign(x, centers)
        sse = _sse(x, centers, new_assign)
        assert sse <= prev + 1e-9 * max(1.0, abs(prev)), "k-means SSE increased"
        prev = sse
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    for c in range(k):
        if np.any(assign == c):
            centers[c] = x[assign == c].mean(axis=0)
    return centers, assign, _sse(x, centers, assign)


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300):
    """Best of ``restarts`` k-means++ seeded Lloyd runs: (centers, assignments, sse)."""
    x = np.asarray(points, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("k-means needs at least one point")
    if not 1 <= k <= len(x):
        raise ValueError(f"K={k} must lie in [1, {len(x)}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        res = lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or res[2] < best[2]:
            best = res
    return best


def sse_curve(points, k_max: int = 10, seed: int = 0, restarts: int = 10) -> np.ndarray:
    return np.array([kmeans(points, k, seed=seed, restarts=restarts)[2] for k in range(1, k_max + 1)])


def elbow_from_curve(sse: np.ndarray, flat_ratio: float = 0.9) -> int:
    """K maximising the distance to the chord from k=1 to k_max, axes scaled to [0, 1].

    A curve that loses less than ``1 - flat_ratio`` of its SSE has no elbow and yields K=1.
    """
    sse = np.asarray(sse, dtype=np.float64)
    k_max = len(sse)
    if k_max < 3 or sse[-1] >= flat_ratio * sse[0]:
        return 1
    ks = (np.arange(1, k_max + 1) - 1.0) / (k_max - 1.0)
    ys = (sse - sse[-1]) / (sse[0] - sse[-1])
    # chord runs from (0, 1) to (1, 0): distance of (x, y) is |x + y - 1| / sqrt(2)
    dist = np.abs(ks + ys - 1.0) / np.sqrt(2.0)
    return int(np.argmax(dist[1:-1]) + 2)


def select_k_elbow(points, k_max: int = 10, seed: int = 0) -> int:
    x = np.asarray(points, dtype=np.float64)
    if len(x) <= k_max:
        raise ValueError(f"need more than k_max={k_max} points, got {len(x)}")
    return elbow_from_curve(sse_curve(x, k_max, seed))


def weights_from_counts(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    return c / c.sum()


def build_cluster_model(latents, method: str = "tsne", seed: int = 0, k_max: int = 10,
                        perplexity: float = 30.0) -> ClusterModel:
    x = np.asarray(latents, dtype=np.float64)
    if len(x) < 10:
        raise ValueError(f"need at least 10 reference latents, got {len(x)}")
    red = reduce(x, method, seed, perplexity)
    k = select_k_elbow(red.points, min(k_max, len(x) - 1), seed)
    centers, assign, sse = kmeans(red.points, k, seed)
    counts = np.bincount(assign, minlength=k)
    log.info("clusters: K=%d counts=%s sse=%.4g", k, counts.tolist(), sse)
    return ClusterModel(k, centers, weights_from_counts(counts), x, assign.astype(np.int64), method, red.points)


def _nearest_labels(model: ClusterModel, zs: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(zs), dtype=np.int64)
    for c0 in range(0, len(zs), chunk):
        d = np.sum((zs[c0:c0 + chunk, None, :] - model.anchors[None]) ** 2, axis=-1)
        tied = d == d.min(axis=1, keepdims=True)
        # among equally near anchors the lowest cluster label wins
        out[c0:c0 + chunk] = np.where(tied, model.labels[None, :], np.iinfo(np.int64).max).min(axis=1)
    return out


def assign_cluster(model: ClusterModel, z) -> int:
    """Cluster label of the nearest anchor in latent space."""
    return int(_nearest_labels(model, np.asarray(z, dtype=np.float64).reshape(1, -1))[0])


def assign_clusters(model: ClusterModel, zs) -> np.ndarray:
    return _nearest_labels(model, np.atleast_2d(np.asarray(zs, dtype=np.float64)))


def write_cluster_json(path, model: ClusterModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)


def write_reduced_csv(path, points: np.ndarray, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "cluster"])
        for (px, py), c in zip(points, labels):
            w.writerow([repr(float(px)), repr(float(py)), int(c)])

"""Stage functions shared by the CLI and the acceptance suite.

reference footage -> MVAE -> reference latents + clusters -> imitation policy
-> evaluation. Every stage is a pure function of (config, seed, inputs) and
each has a save/load pair built on the binary checkpoint container.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, file_sha256, load_checkpoint, load_module_tensors, \
    module_tensors, save_checkpoint
from .cluster import ClusterModel, assign_clusters, build_cluster_model
from .config import EngineConfig, to_dict
from .controllers import Pattern, scripted_reference_controller
from .metrics import MetricReport, apd, fid, js_divergence, state_features, task_return
from .mvae import MVAE, MvaeConfig, encode_frames, freeze, train_mvae
from .observation import CLIP_LEN, Clip, load_segmented_frames, rasterize_silhouettes, window_clips, write_frames
from .rl import GaussianPolicy, OBS_DIM
from .sim import EnvConfig, init_environment, step_environment, trajectory_records
from .trainer import CbilTrainer, RolloutBatch, TrainConfig, evaluate_policy, random_actions, window_style

log = logging.getLogger(__name__)

WARMUP_TICKS = CLIP_LEN  # first window of scripted footage is dropped while headings settle
RANDOM_SEED_OFFSET = 100


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------- footage

def render_footage(env_cfg: EnvConfig, camera, actor, steps: int, seed: int, keep_records: bool = False):
    """Run ``actor(env, rng)`` for ``steps`` ticks, rendering after each one."""
    env = init_environment(env_cfg, seed)
    rng = np.random.default_rng([seed, 3])
    frames = np.zeros((steps, camera.height, camera.width), dtype=np.uint8)
    records = []
    for t in range(steps):
        env, done = step_environment(env, actor(env, rng))
        frames[t] = rasterize_silhouettes(env, camera).bits
        if keep_records:
            records.extend(trajectory_records(env, done))
    return frames, records


def reference_footage(cfg: EngineConfig, keep_records: bool = False):
    pattern = Pattern.parse(cfg.reference.pattern)
    frames, records = render_footage(
        cfg.sim, cfg.camera, lambda env, rng: scripted_reference_controller(env, pattern, cfg.rewards),
        cfg.reference.steps, cfg.seed, keep_records)
    n = cfg.sim.n_agents
    return frames[WARMUP_TICKS:], records[WARMUP_TICKS * n:]


def random_footage(cfg: EngineConfig) -> np.ndarray:
    if cfg.reference.random_steps == 0:
        return np.zeros((0, cfg.camera.height, cfg.camera.width), dtype=np.uint8)
    frames, _ = render_footage(cfg.sim, cfg.camera, random_actions, cfg.reference.random_steps,
                               cfg.seed + RANDOM_SEED_OFFSET)
    return frames


def mvae_clips(cfg: EngineConfig, ref_frames: np.ndarray, rand_frames: np.ndarray) -> list[Clip]:
    """Training clips: reference and random footage, each windowed at the MVAE stride."""
    stride = cfg.reference.mvae_stride
    return window_clips(ref_frames, stride) + window_clips(rand_frames, stride)


def reference_latents(mvae: MVAE, ref_frames: np.ndarray) -> np.ndarray:
    """Latents of consecutive non-overlapping windows, the unit of a reference transition."""
    clips = window_clips(ref_frames, CLIP_LEN)
    if not clips:
        return np.zeros((0, mvae.cfg.latent_dim))
    return encode_frames(mvae, np.stack([c.frames for c in clips]).astype(np.float32))


# ---------------------------------------------------------------- reference archive

def write_reference_archive(directory, cfg: EngineConfig, config_text: str, frames: np.ndarray,
                            records=None) -> dict:
    os.makedirs(directory, exist_ok=True)
    fdir = os.path.join(directory, "frames")
    names = write_frames(fdir, list(frames))
    clips = window_clips(frames, cfg.reference.stride)
    digest = hashlib.sha256()
    for name in names:
        with open(os.path.join(fdir, name), "rb") as fh:
            digest.update(fh.read())
    manifest = {
        "pattern": Pattern.parse(cfg.reference.pattern).value, "seed": cfg.seed, "steps": cfg.reference.steps,
        "warmup": WARMUP_TICKS, "stride": cfg.reference.stride, "frame_count": len(names),
        "clip_count": len(clips), "clips": [{"start": c.start, "frames": names[c.start:c.start + CLIP_LEN]}
                                            for c in clips],
        "width": cfg.camera.width, "height": cfg.camera.height, "frames_sha256": digest.hexdigest(),
        "config": config_text,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    if records is not None:
        write_jsonl(os.path.join(directory, "trajectory.jsonl"), records)
    return manifest


def load_reference_archive(directory) -> tuple[np.ndarray, dict]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise MissingArtifact(f"reference archive manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    frames = load_segmented_frames(os.path.join(directory, "frames"))
    if len(frames) != manifest["frame_count"]:
        raise CheckpointError(f"{directory}: manifest lists {manifest['frame_count']} frames, found {len(frames)}")
    return np.stack([f.bits for f in frames]) if frames else np.zeros((0, 1, 1), np.uint8), manifest


def write_jsonl(path, records) -> str:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return file_sha256(path)


# ---------------------------------------------------------------- MVAE stage

def fit_mvae(cfg: EngineConfig, clips, curve=None) -> MVAE:
    log.info("training MVAE on %d clips for %d epochs", len(clips), cfg.mvae.epochs)
    return train_mvae(clips, cfg.mvae, curve=curve)


def save_mvae(path, model: MVAE, config_text: str, curve=None) -> str:
    meta = {"mvae_config": dataclasses.asdict(model.cfg), "curve": list(curve or [])}
    return save_checkpoint(path, Checkpoint("mvae", module_tensors(model, "mvae."), config_text,
                                            {"seed": model.cfg.seed}, meta))


def load_mvae(path) -> MVAE:
    if not os.path.exists(path):
        raise MissingArtifact(f"MVAE checkpoint not found: {path}")
    ckpt = load_checkpoint(path, "mvae")
    mc = dict(ckpt.meta["mvae_config"])
    model = MVAE(MvaeConfig(**mc))
    load_module_tensors(model, ckpt.tensors, "mvae.")
    return freeze(model)


# ---------------------------------------------------------------- cluster stage

def fit_clusters(cfg: EngineConfig, latents: np.ndarray) -> ClusterModel:
    c = cfg.cluster
    return build_cluster_model(latents, c.method, cfg.seed, c.k_max, c.perplexity)


def save_clusters(path, model: ClusterModel, config_text: str, mvae_path=None) -> str:
    counts = np.bincount(model.labels, minlength=model.k)
    tensors = {"anchors": model.anchors, "labels": model.labels.astype(np.float32),
               "counts": counts.astype(np.float32), "centers": np.asarray(model.centers)}
    if model.reduced is not None:
        tensors["reduced"] = model.reduced
    meta = {"k": int(model.k), "method": model.method, "counts": counts.tolist(),
            "mvae_path": None if mvae_path is None else os.path.basename(str(mvae_path)),
            "mvae_sha256": None if mvae_path is None else file_sha256(mvae_path)}
    return save_checkpoint(path, Checkpoint("cluster", tensors, config_text, {}, meta))


def load_clusters(path, mvae_path=None) -> ClusterModel:
    if not os.path.exists(path):
        raise MissingArtifact(f"cluster model not found: {path}")
    ckpt = load_checkpoint(path, "cluster")
    _check_parent(ckpt.meta, "mvae", mvae_path)
    counts = np.asarray(ckpt.meta["counts"], dtype=np.float64)
    t = ckpt.tensors
    return ClusterModel(int(ckpt.meta["k"]), t["centers"].astype(np.float64), counts / counts.sum(),
                        t["anchors"].astype(np.float64), t["labels"].astype(np.int64), ckpt.meta["method"],
                        t["reduced"].astype(np.float64) if "reduced" in t else None)


def _check_parent(meta: dict, name: str, path) -> None:
    if path is None or meta.get(f"{name}_sha256") is None:
        return
    if not os.path.exists(path):
        raise MissingArtifact(f"{name} checkpoint not found: {path}")
    if file_sha256(path) != meta[f"{name}_sha256"]:
        raise CheckpointError(f"{path} does not match the {name} checkpoint this artifact was built from")


# ---------------------------------------------------------------- policy stage

def make_trainer(cfg: EngineConfig, mvae: MVAE, cluster: ClusterModel, no_clustering: bool | None = None):
    train = cfg.train if no_clustering is None else dataclasses.replace(cfg.train, no_clustering=no_clustering)
    return CbilTrainer(train, cfg.sim, cfg.camera, mvae, cluster, cluster.anchors, cfg.rewards)


def save_policy(path, trainer: CbilTrainer, config_text: str, mvae_path=None, cluster_path=None) -> str:
    tensors, meta = trainer.state_tensors()
    meta["train_config"] = to_dict(trainer.cfg)
    for name, p in (("mvae", mvae_path), ("cluster", cluster_path)):
        meta[f"{name}_path"] = None if p is None else os.path.basename(str(p))
        meta[f"{name}_sha256"] = None if p is None else file_sha256(p)
    return save_checkpoint(path, Checkpoint("policy", tensors, config_text, trainer.rng_state(), meta))


def load_policy(path, mvae_path=None, cluster_path=None) -> tuple[GaussianPolicy, Checkpoint]:
    if not os.path.exists(path):
        raise MissingArtifact(f"policy checkpoint not found: {path}")
    ckpt = load_checkpoint(path, "policy")
    _check_parent(ckpt.meta, "mvae", mvae_path)
    _check_parent(ckpt.meta, "cluster", cluster_path)
    tc = ckpt.meta["train_config"]
    policy = GaussianPolicy(OBS_DIM, tuple(tc["policy_hidden"]), log_std=tc["log_std"])
    load_module_tensors(policy, ckpt.tensors, "policy.")
    policy.eval()
    return policy, ckpt


def resume_trainer(trainer: CbilTrainer, ckpt: Checkpoint) -> CbilTrainer:
    trainer.load_state(ckpt.tensors, ckpt.meta, ckpt.rng_state)
    return trainer


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    batch: RolloutBatch
    task_mean: float
    task_std: float
    js: float
    records: list = field(default_factory=list)


def evaluate(cfg: EngineConfig, policy, mvae: MVAE, cluster: ClusterModel, ticks: int | None = None,
             seed: int | None = None, deterministic: bool = True, actor=None, env_cfg: EnvConfig | None = None,
             keep_records: bool = False) -> Evaluation:
    """Fresh-environment rollout scored against the reference latents."""
    ticks = ticks or cfg.metrics.eval_ticks
    seed = cfg.seed + cfg.metrics.eval_seed_offset if seed is None else seed
    batch = evaluate_policy(policy, mvae, cfg.train.task, env_cfg or cfg.sim, cfg.camera, ticks, seed, cfg.rewards,
                            deterministic=deterministic, actor=actor, keep_records=keep_records)
    mean, std = task_return(batch.r_task, batch.dones)
    js = js_divergence(batch.latents, cluster.anchors, cluster, cfg.metrics.js_smoothing)
    return Evaluation(batch, mean, std, js, batch.records)


def rollout_records(batch: RolloutBatch, cfg: EngineConfig, style: np.ndarray | None = None) -> list[dict]:
    """Trajectory records with the per-agent reward breakdown under ``rw``."""
    t_len, n = batch.r_task.shape
    rw = cfg.rewards
    style_t = np.zeros(t_len) if style is None else window_style(style, t_len)
    out = []
    for t in range(t_len):
        for i in range(n):
            rec = dict(batch.records[t * n + i])
            s, b, h = float(style_t[t]), float(batch.r_bio[t, i]), float(batch.r_task[t, i])
            rec["rw"] = {"style": s, "bio": b, "task": h, "total": rw.w_style * s + rw.w_bio * b + rw.w_task * h}
            out.append(rec)
    return out


def metric_report(cfg: EngineConfig, ev: Evaluation, cluster: ClusterModel, apd_window: int = CLIP_LEN) -> MetricReport:
    lat = ev.batch.latents
    ref = cluster.anchors
    fid_val = fid(lat, ref) if len(lat) >= 2 and len(ref) >= 2 else None
    clips = _state_clips(ev.records, apd_window) if ev.records else []
    apd_vals = [apd(c) for c in clips if len(c) >= 2]
    return MetricReport(fid=fid_val, js=ev.js,
                        apd_mean=float(np.mean(apd_vals)) if apd_vals else None,
                        apd_std=float(np.std(apd_vals)) if apd_vals else None,
                        task_return_mean=ev.task_mean, task_return_std=ev.task_std,
                        config={"task": cfg.train.task, "seed": cfg.seed})


def _state_clips(records, window: int) -> list[list[np.ndarray]]:
    """Per-window groups of per-agent state clips (T, 7) for APD."""
    by_t: dict[int, list] = {}
    for r in records:
        by_t.setdefault(r["t"], []).append(r)
    ticks = sorted(by_t)
    groups = []
    for w0 in range(0, len(ticks) - window + 1, window):
        span = [sorted(by_t[t], key=lambda r: r["id"]) for t in ticks[w0:w0 + window]]
        n = min(len(s) for s in span)
        feats = [state_features(np.array([s[i]["p"] for s in span]), np.array([s[i]["d"] for s in span]),
                                np.array([s[i]["v"] for s in span])) for i in range(n)]
        groups.append(feats)
    return groups


def cluster_labels(cluster: ClusterModel, latents) -> np.ndarray:
    return assign_clusters(cluster, latents)

"""Closed-loop imitation experiment: scripted reference -> MVAE -> clusters -> policy, with an optional
no-clustering ablation trained on the same frozen MVAE and reference latents."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .pipeline import evaluate, fit_clusters, fit_mvae, make_trainer, mvae_clips, random_footage, \
    reference_footage, reference_latents
from .trainer import random_actions

log = logging.getLogger(__name__)

STYLE_WINDOW = 3  # iterations averaged at each end when judging the style trend


@dataclass
class RunResult:
    label: str
    init_task: float
    init_js: float
    final_task: float
    final_js: float
    style_first: float
    style_last: float
    rows: list
    total_min: float
    total_max: float
    identity_err: float
    seconds: float

    @property
    def js_drop(self) -> float:
        return 1.0 - self.final_js / self.init_js if self.init_js > 0 else 0.0


@dataclass
class ExperimentResult:
    seed: int
    k: int
    weights: list
    random_task: float
    mvae_seconds: float
    mvae_curve: list
    runs: dict = field(default_factory=dict)


def _reward_monitor(cfg: EngineConfig):
    stats = {"min": np.inf, "max": -np.inf, "err": 0.0}
    w = cfg.rewards

    def callback(trainer, row):
        r = trainer.last_rewards
        tot = r["total"]
        stats["min"] = min(stats["min"], float(tot.min()))
        stats["max"] = max(stats["max"], float(tot.max()))
        ident = w.w_style * r["style"] + w.w_bio * r["bio"] + w.w_task * r["task"]
        stats["err"] = max(stats["err"], float(np.abs(tot - ident).max()))

    return stats, callback


def train_run(cfg: EngineConfig, mvae, cluster, no_clustering: bool) -> RunResult:
    t0 = time.time()
    trainer = make_trainer(cfg, mvae, cluster, no_clustering)
    init = evaluate(cfg, trainer.policy, mvae, cluster)
    stats, cb = _reward_monitor(cfg)
    rows = trainer.train(cb)
    final = evaluate(cfg, trainer.policy, mvae, cluster)
    style = [r["mean_style"] for r in rows]
    k = min(STYLE_WINDOW, max(1, len(style) // 2))
    label = "unclustered" if no_clustering else "clustered"
    res = RunResult(label, init.task_mean, init.js, final.task_mean, final.js, float(np.mean(style[:k])),
                    float(np.mean(style[-k:])), rows, stats["min"], stats["max"], stats["err"], time.time() - t0)
    log.info("%s seed %d: task %.3f -> %.3f, js %.3f -> %.3f, style %.4f -> %.4f (%.0fs)", label, cfg.seed,
             res.init_task, res.final_task, res.init_js, res.final_js, res.style_first, res.style_last, res.seconds)
    return res


def closed_loop(cfg: EngineConfig, ablation: bool = True) -> ExperimentResult:
    ref_frames, _ = reference_footage(cfg)
    clips = mvae_clips(cfg, ref_frames, random_footage(cfg))
    t0 = time.time()
    curve: list = []
    mvae = fit_mvae(cfg, clips, curve)
    mvae_seconds = time.time() - t0
    latents = reference_latents(mvae, ref_frames)
    cluster = fit_clusters(cfg, latents)
    rand = evaluate(cfg, None, mvae, cluster, actor=random_actions)
    out = ExperimentResult(cfg.seed, cluster.k, cluster.weights.tolist(), rand.task_mean, mvae_seconds, curve)
    out.runs["clustered"] = train_run(cfg, mvae, cluster, False)
    if ablation:
        out.runs["unclustered"] = train_run(cfg, mvae, cluster, True)
    return out

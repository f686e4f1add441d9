"""Acceptance gate: one test and one PASS/FAIL summary line per criterion.

Criteria 6, 7 and 9 share one set of closed-loop runs (three seeds, each
with the clustered run and the no-clustering ablation on the same frozen
MVAE). Expect roughly half an hour for those on one CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from sklearn.cluster import KMeans

from cbil.config import load_config, with_seed
from cbil.discriminator import Discriminator, disc_loss
from cbil.experiment import closed_loop
from cbil.gradcheck import check_input, check_module
from cbil.metrics import apd, frechet_distance, js_from_histograms
from cbil.mvae import MVAE, MvaeConfig, loss_terms
from cbil.observation import CLIP_LEN
from cbil.rewards import (Circling, aggregation_reward, alignment_reward, chase_rewards, circling_reward,
                          feeding_reward)
from cbil.rl import OBS_DIM, GaussianPolicy, ValueNet, compute_gae
from cbil.cluster import build_cluster_model, kmeans, select_k_elbow
from cbil.sim import AgentState
from conftest import ROOT, record_criterion, smoke_pipeline

SEEDS = (0, 1, 2)
GRAD_TOL = 1e-4
DRAWS = 20


# ---------------------------------------------------------------- 1. GAE oracle

def brute_force_gae(r, v, d, gamma, lam):
    adv = np.zeros(len(r))
    for t in range(len(r)):
        total, coef = 0.0, 1.0
        for k in range(t, len(r)):
            total += coef * (r[k] + gamma * v[k + 1] * (1.0 - d[k]) - v[k])
            if d[k]:
                break
            coef *= gamma * lam
        adv[t] = total
    return adv


def test_criterion_1_gae_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        r, v, d = rng.standard_normal(20), rng.standard_normal(21), rng.random(20) < 0.1
        adv, _ = compute_gae(r, v, d, 0.99, 0.95)
        worst = max(worst, float(np.abs(adv - brute_force_gae(r, v, d, 0.99, 0.95)).max()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 1.0
    record_criterion(1, ok, f"max |gae - oracle| = {worst:.2e} over 100 trajectories in {secs:.2f}s")
    assert ok


# ---------------------------------------------------------------- 2. gradient checks

MINI = MvaeConfig(height=4, width=4, patch_size=2, model_dim=4, depth=1, heads=1, decoder_depth=1, mlp_ratio=2,
                  latent_dim=3)


def mvae_draw(seed: int) -> float:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    m = MVAE(MINI).double()
    clip = (rng.random((2, CLIP_LEN, 4, 4)) < 0.4).astype(np.float64)
    vis = torch.as_tensor(clip * (rng.random(clip.shape) < 0.5))
    tgt = torch.as_tensor(clip)
    eps = torch.as_tensor(rng.standard_normal((2, MINI.latent_dim)))

    def f():
        recon, mu, logvar, _ = m(vis, eps)
        return loss_terms(recon, tgt, mu, logvar, MINI.beta)[2]

    return max(check_module(f, m).values())


def policy_value_draw(seed: int) -> float:
    torch.manual_seed(seed)
    pol = GaussianPolicy(OBS_DIM, (8, 8), out_scale=1.0, learn_std=True).double()
    val = ValueNet(OBS_DIM, (8, 8)).double()
    obs = torch.randn(6, OBS_DIM, dtype=torch.float64)
    act = torch.randn(6, 3, dtype=torch.float64)
    ret = torch.randn(6, dtype=torch.float64)
    errs = check_module(lambda: pol.log_prob(obs, act).mean(), pol)
    errs.update(check_module(lambda: torch.mean((val(obs) - ret) ** 2), val))
    return max(errs.values())


def disc_draw(seed: int) -> float:
    torch.manual_seed(seed)
    d = Discriminator(100).double()
    x = 3.0 * torch.randn(4, 200, dtype=torch.float64)
    err_in = check_input(d, x)
    # the penalised loss itself, at miniature width so every parameter can be perturbed
    small = Discriminator(3, (8, 4)).double()
    ref, pol = torch.randn(5, 6, dtype=torch.float64), torch.randn(5, 6, dtype=torch.float64)
    err_loss = max(check_module(lambda: disc_loss(small, ref, pol, 5.0)[0], small).values())
    return max(err_in, err_loss)


def test_criterion_2_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    for name, fn in (("mvae", mvae_draw), ("policy/value", policy_value_draw), ("discriminator", disc_draw)):
        worst[name] = max(fn(seed) for seed in range(DRAWS))
    secs = time.perf_counter() - t0
    ok = all(v < GRAD_TOL for v in worst.values()) and secs < 120.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(2, ok, f"worst relative error over {DRAWS} draws: {detail}; {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------- 3. analytic metrics

def test_criterion_3_metric_values():
    t0 = time.perf_counter()
    f1 = frechet_distance([0.0], [[1.0]], [1.0], [[1.0]])
    f2 = frechet_distance([0.0], [[4.0]], [0.0], [[1.0]])
    js = js_from_histograms([0.5, 0.5], [1.0, 0.0])
    apd_err = 0.0
    for l in (1, 5, 10):
        a = np.zeros((l, 7))
        b = a.copy()
        b[:, 3] = 1.0
        apd_err = max(apd_err, abs(apd([a, b]) - math.sqrt(l)))
    secs = time.perf_counter() - t0
    ok = abs(f1 - 1) <= 1e-8 and abs(f2 - 1) <= 1e-8 and abs(js - 0.3113) <= 1e-4 and apd_err <= 1e-9 and secs < 1
    record_criterion(3, ok, f"fid {f1:.10f} / {f2:.10f}, js {js:.5f} bits, apd err {apd_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 4. clustering recovery

def test_criterion_4_cluster_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    centers = np.zeros((3, 100))
    centers[0, 0], centers[1, 1], centers[2, 2] = 5.0, 5.0, 5.0  # pairwise 5 * sqrt(2) apart
    x = np.concatenate([c + 0.1 * rng.standard_normal((100, 100)) for c in centers])
    k = select_k_elbow(x, 10, seed=0)
    _, _, sse = kmeans(x, 3, seed=0)
    oracle = KMeans(n_clusters=3, n_init=50, random_state=0).fit(x).inertia_
    model = build_cluster_model(x, "tsne", seed=0)
    wsum = float(model.weights.sum())
    secs = time.perf_counter() - t0
    ok = k == 3 and model.k == 3 and sse <= 1.01 * oracle and abs(wsum - 1) <= 1e-9 and secs < 30
    record_criterion(4, ok, f"K={k} (t-SNE path K={model.k}), SSE {sse:.3f} vs oracle {oracle:.3f}, "
                            f"sum W = {wsum:.12f}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5. reward spot checks

def agent(pos=(0.0, 0.0, 0.0), fwd=(1.0, 0.0, 0.0), speed=1.0):
    f = np.asarray(fwd, dtype=np.float64)
    f = f / np.linalg.norm(f)
    return AgentState.from_heading(np.asarray(pos, dtype=np.float64), math.atan2(f[2], f[0]),
                                   math.asin(np.clip(f[1], -1, 1)), speed)


def test_criterion_5_reward_spot_checks():
    t0 = time.perf_counter()
    got = {
        "circling": circling_reward(agent(speed=1.2), Circling(np.array([0.5, 0.0, math.sqrt(0.75)]), 1.0)),
        "alignment": alignment_reward(agent(), [agent(fwd=(0, 0, 1)), agent(fwd=(0, 0, -1))]),
        "aggregation": aggregation_reward(agent(pos=(1, 0, 0)), np.zeros(3), a=2, b=1, w_agg=1),
        "chase": chase_rewards(agent(speed=1.5), agent(pos=(2, 0, 0), speed=1.0))[0],
        "feeding": feeding_reward(agent(), np.array([0.005, 0.0, 0.0])),
    }
    want = {"circling": 4.6, "alignment": 1.0, "aggregation": -0.5, "chase": 12.0, "feeding": 10.0}
    errs = {k: abs(got[k] - want[k]) for k in want}
    secs = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-9 and secs < 1
    record_criterion(5, ok, ", ".join(f"{k} {got[k]:.12g}" for k in want))
    assert ok


# ---------------------------------------------------------------- 6, 7, 9. closed loop

@pytest.fixture(scope="module")
def closed_loop_runs():
    base, _ = load_config(ROOT / "configs" / "acceptance.yaml")
    torch.set_num_threads(1)
    out = []
    for seed in SEEDS:
        t0 = time.time()
        result = closed_loop(with_seed(base, seed), ablation=True)
        total = time.time() - t0
        # criterion 6 covers everything except the ablation run
        result.criterion6_seconds = total - result.runs["unclustered"].seconds
        out.append(result)
    return out


def seed_claims(res):
    run = res.runs["clustered"]
    a = run.final_task >= 0.6 and run.final_task >= 3.0 * res.random_task
    b = run.js_drop >= 0.30
    c = run.style_last > run.style_first
    return a, b, c


@pytest.mark.slow
def test_criterion_6_closed_loop(closed_loop_runs):
    lines, passes = [], 0
    for res in closed_loop_runs:
        run = res.runs["clustered"]
        a, b, c = seed_claims(res)
        passes += a and b and c
        lines.append(f"seed {res.seed}: K={res.k} task {run.final_task:.3f} (random {res.random_task:.3f}, "
                     f"need {max(0.6, 3 * res.random_task):.3f}) [{'ok' if a else 'no'}], "
                     f"js {run.init_js:.3f}->{run.final_js:.3f} drop {run.js_drop:.0%} [{'ok' if b else 'no'}], "
                     f"style {run.style_first:.4f}->{run.style_last:.4f} [{'ok' if c else 'no'}]")
    minutes = sum(r.criterion6_seconds for r in closed_loop_runs) / 60
    ok = passes >= 2 and minutes <= 45
    for line in lines:
        print("   ", line)
    record_criterion(6, ok, f"{passes}/3 seeds pass (a), (b) and (c); {minutes:.1f} min | " + " | ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_7_clustering_ablation(closed_loop_runs):
    wins, parts = 0, []
    for res in closed_loop_runs:
        c, u = res.runs["clustered"].final_js, res.runs["unclustered"].final_js
        wins += c <= u
        parts.append(f"seed {res.seed}: {c:.4f} vs {u:.4f}")
    ok = wins >= 2
    record_criterion(7, ok, f"clustered JS <= unclustered on {wins}/3 seeds ({'; '.join(parts)})")
    assert ok


@pytest.mark.slow
def test_criterion_9_reward_range(closed_loop_runs):
    runs = [r for res in closed_loop_runs for r in res.runs.values()]
    lo, hi = min(r.total_min for r in runs), max(r.total_max for r in runs)
    err = max(r.identity_err for r in runs)
    n = sum(r.rows[-1]["steps"] for r in runs)
    ok = lo >= 0.0 and hi <= 1.0 and err <= 1e-9
    record_criterion(9, ok, f"{n} logged totals within [{lo:.4f}, {hi:.4f}], max identity error {err:.1e}")
    assert ok


# ---------------------------------------------------------------- 8. determinism

def test_criterion_8_determinism(tmp_path):
    a = smoke_pipeline(tmp_path / "a")
    b = smoke_pipeline(tmp_path / "b")
    names = ("rollout", "mvae", "clusters", "policy", "report")
    same = {k: Path(a[k]).read_bytes() == Path(b[k]).read_bytes() for k in names}
    frames = all(fa.read_bytes() == fb.read_bytes() for fa, fb in
                 zip(sorted((a["ref"] / "frames").iterdir()), sorted((b["ref"] / "frames").iterdir())))
    ok = all(same.values()) and frames
    record_criterion(8, ok, "bit-identical: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items())
                     + f", reference frames {'yes' if frames else 'NO'}")
    assert ok

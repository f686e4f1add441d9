import json
import os

import numpy as np
import pytest
import torch

from cbil.cluster import ClusterModel
from cbil.config import parse_config
from cbil.controllers import scripted_reference_controller
from cbil.mvae import MVAE, freeze
from cbil.observation import CLIP_LEN, load_segmented_frames
from cbil.pipeline import (MissingArtifact, WARMUP_TICKS, evaluate, load_reference_archive, metric_report,
                           mvae_clips, random_footage, reference_footage, reference_latents, rollout_records,
                           write_jsonl, write_reference_archive)

TEXT = """
seed: 2
sim: {n_agents: 10}
camera: {width: 32, height: 32}
reference: {steps: 500, random_steps: 60, mvae_stride: 20}
mvae: {height: 32, width: 32, model_dim: 16, depth: 1, heads: 2, decoder_depth: 1, token_patch: 16}
metrics: {eval_ticks: 60}
"""


@pytest.fixture(scope="module")
def cfg():
    return parse_config(TEXT)


@pytest.fixture(scope="module")
def footage(cfg):
    return reference_footage(cfg, keep_records=True)


def test_archive_counts(tmp_path, cfg, footage):
    frames, records = footage
    assert len(frames) == 500 - WARMUP_TICKS
    manifest = write_reference_archive(tmp_path / "ref", cfg, TEXT, frames, records)
    # 500 ticks minus the warm-up window leave 49 non-overlapping stride-10 clips
    assert manifest["clip_count"] == 49
    assert manifest["frame_count"] == len(os.listdir(tmp_path / "ref" / "frames")) == 490
    on_disk = json.loads((tmp_path / "ref" / "manifest.json").read_text())
    assert on_disk["clip_count"] == 49 and len(on_disk["clips"]) == 49
    assert all(len(c["frames"]) == CLIP_LEN for c in on_disk["clips"])
    lines = (tmp_path / "ref" / "trajectory.jsonl").read_text().splitlines()
    assert len(lines) == 490 * cfg.sim.n_agents
    back, _ = load_reference_archive(tmp_path / "ref")
    assert np.array_equal(back, frames)


def test_archive_hash_fixed_seed(tmp_path, cfg, footage):
    a = write_reference_archive(tmp_path / "a", cfg, TEXT, footage[0])
    again, _ = reference_footage(cfg)
    b = write_reference_archive(tmp_path / "b", cfg, TEXT, again)
    assert a["frames_sha256"] == b["frames_sha256"]
    other, _ = reference_footage(parse_config(TEXT.replace("seed: 2", "seed: 3")))
    c = write_reference_archive(tmp_path / "c", cfg, TEXT, other)
    assert c["frames_sha256"] != a["frames_sha256"]


def test_archive_manifest_mismatch(tmp_path, cfg, footage):
    write_reference_archive(tmp_path / "ref", cfg, TEXT, footage[0][:30])
    os.remove(tmp_path / "ref" / "frames" / sorted(os.listdir(tmp_path / "ref" / "frames"))[-1])
    with pytest.raises(ValueError, match="manifest"):
        load_reference_archive(tmp_path / "ref")
    with pytest.raises(MissingArtifact):
        load_reference_archive(tmp_path / "nowhere")


def test_mvae_training_clips(cfg, footage):
    rnd = random_footage(cfg)
    assert len(rnd) == 60 and rnd.dtype == np.uint8
    clips = mvae_clips(cfg, footage[0], rnd)
    assert len(clips) == len(range(0, 490 - CLIP_LEN + 1, 20)) + len(range(0, 60 - CLIP_LEN + 1, 20))


@pytest.fixture(scope="module")
def model(cfg):
    torch.manual_seed(0)
    return freeze(MVAE(cfg.mvae))


def test_reference_latents_windows(cfg, footage, model):
    lat = reference_latents(model, footage[0])
    assert lat.shape == (49, cfg.mvae.latent_dim)
    assert np.array_equal(lat, reference_latents(model, footage[0]))


def test_scripted_against_itself(cfg, model):
    actor = lambda env, rng: scripted_reference_controller(env, cfg.reference.pattern, cfg.rewards)  # noqa: E731
    first = evaluate(cfg, None, model, ClusterModel.uniform(np.zeros((1, cfg.mvae.latent_dim))), actor=actor,
                     keep_records=True)
    lat = first.batch.latents
    own = ClusterModel(2, np.zeros((2, 2)), np.array([0.5, 0.5]), lat, np.arange(len(lat)) % 2, "pca")
    second = evaluate(cfg, None, model, own, actor=actor, keep_records=True)
    assert np.array_equal(second.batch.latents, lat)
    assert second.js == 0.0
    rep = metric_report(cfg, second, own)
    assert rep.fid <= 1e-6 and rep.js == 0.0
    assert rep.apd_mean > 0 and rep.task_return_mean == pytest.approx(second.task_mean)


def test_deterministic_rollout_jsonl(cfg, model, footage, tmp_path):
    lat = reference_latents(model, footage[0])
    cluster = ClusterModel.uniform(lat)
    from cbil.rl import GaussianPolicy, OBS_DIM

    torch.manual_seed(1)
    policy = GaussianPolicy(OBS_DIM, (16, 16))
    digests = []
    for name in ("a", "b"):
        ev = evaluate(cfg, policy, model, cluster, ticks=30, keep_records=True)
        recs = rollout_records(ev.batch, cfg)
        digests.append(write_jsonl(tmp_path / f"{name}.jsonl", recs))
    assert digests[0] == digests[1]
    first = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(first) == {"t", "id", "p", "d", "q", "v", "role", "done", "rw"}
    assert set(first["rw"]) == {"style", "bio", "task", "total"}
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 30 * cfg.sim.n_agents


def test_random_frames_reload(tmp_path, cfg):
    from cbil.observation import write_frames

    rnd = random_footage(cfg)
    write_frames(tmp_path / "r", list(rnd))
    back = np.stack([f.bits for f in load_segmented_frames(tmp_path / "r")])
    assert np.array_equal(back, rnd)

import csv
import json
import shutil

import numpy as np

from cbil.checkpoint import file_sha256
from conftest import SMOKE, run_cli


def test_pipeline_artifacts(smoke_run):
    p = smoke_run
    manifest = json.loads((p["ref"] / "manifest.json").read_text())
    assert manifest["clip_count"] == 10 and manifest["seed"] == 7
    report = json.loads(p["report"].read_text())
    assert set(report) == {"fid", "js", "apd_mean", "apd_std", "task_return_mean", "task_return_std", "config"}
    assert report["fid"] >= 0 and 0 <= report["js"] <= 1
    rows = list(csv.DictReader(p["log"].open()))
    assert len(rows) == 2 and int(rows[-1]["steps"]) == 320
    curve = list(csv.DictReader(p["curve"].open()))
    assert len(curve) == 3
    clusters = json.loads(p["cluster_json"].read_text())
    assert clusters["anchor_count"] == 10 and abs(sum(clusters["weights"]) - 1) < 1e-9


def test_prints_resolved_config(smoke_run):
    code, out, _ = run_cli("export-embedding", "--clusters", smoke_run["clusters"], "--out",
                           smoke_run["ref"].parent / "emb.csv")
    assert code == 0
    assert "# resolved config (seed 7)" in out and "n_agents: 8" in out


def test_eval_self_comparison(smoke_run):
    p = smoke_run
    code, out, _ = run_cli("eval", "--mvae", p["mvae"], "--clusters", p["clusters"], "--trajectory",
                           p["ref"] / "trajectory.jsonl", "--against", p["ref"] / "trajectory.jsonl")
    assert code == 0
    rep = json.loads(out[out.index("{\n"):])
    assert rep["js"] == 0.0 and rep["fid"] <= 1e-6


def test_rollout_is_deterministic(smoke_run, tmp_path):
    p = smoke_run
    code, _, _ = run_cli("rollout", "--mvae", p["mvae"], "--clusters", p["clusters"], "--policy", p["policy"],
                         "--out", tmp_path / "again.jsonl")
    assert code == 0
    assert file_sha256(tmp_path / "again.jsonl") == file_sha256(p["rollout"])
    rec = json.loads(p["rollout"].read_text().splitlines()[0])
    assert set(rec["rw"]) == {"style", "bio", "task", "total"}


def test_rollout_controllers_and_agent_count(smoke_run, tmp_path):
    p = smoke_run
    for controller in ("random", "ClockwiseCircle"):
        out = tmp_path / f"{controller}.jsonl"
        code, _, err = run_cli("rollout", "--mvae", p["mvae"], "--clusters", p["clusters"], "--controller",
                               controller, "--agents", 3, "--ticks", 20, "--out", out, "--frames",
                               tmp_path / controller)
        assert code == 0, err
        lines = out.read_text().splitlines()
        assert len(lines) == 60
        assert "style" not in json.loads(lines[0])["rw"]
        assert len(list((tmp_path / controller).iterdir())) == 20


def test_resume_matches_uninterrupted(smoke_run, tmp_path):
    p = smoke_run
    part = tmp_path / "part.ckpt"
    code, _, _ = run_cli("train-policy", "--mvae", p["mvae"], "--clusters", p["clusters"], "--out", part,
                         "--stop-after", 1)
    assert code == 0
    code, out, _ = run_cli("train-policy", "--mvae", p["mvae"], "--clusters", p["clusters"], "--out",
                           tmp_path / "full.ckpt", "--resume", part)
    assert code == 0 and "resumed at iteration 1" in out
    assert (tmp_path / "full.ckpt").read_bytes() == p["policy"].read_bytes()


def test_no_clustering_ablation(smoke_run, tmp_path):
    p = smoke_run
    code, _, _ = run_cli("train-policy", "--mvae", p["mvae"], "--clusters", p["clusters"], "--out",
                         tmp_path / "flat.ckpt", "--no-clustering", "--steps", 160)
    assert code == 0
    code, _, err = run_cli("train-policy", "--mvae", p["mvae"], "--clusters", p["clusters"], "--out",
                           tmp_path / "x.ckpt", "--resume", tmp_path / "flat.ckpt")
    assert code == 2 and "clustering" in err


# ---------------------------------------------------------------- exit codes

def test_usage_errors(tmp_path):
    assert run_cli()[0] == 1
    assert run_cli("bogus")[0] == 1
    assert run_cli("train-mvae", "--out", "x")[0] == 1
    assert run_cli("gen-reference", "--config", tmp_path / "none.yaml", "--out", tmp_path / "r")[0] == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("sim:\n  n_agent: 3\n")
    code, _, err = run_cli("gen-reference", "--config", bad, "--out", tmp_path / "r")
    assert code == 1 and "n_agent" in err
    bad.write_text("mvae:\n  seed: 3\n")
    assert run_cli("gen-reference", "--config", bad, "--out", tmp_path / "r")[0] == 1
    assert run_cli("gen-reference", "--config", SMOKE, "--pattern", "Spiral", "--out", tmp_path / "r")[0] == 1


def test_missing_and_mismatched_artifacts(smoke_run, tmp_path):
    p = smoke_run
    assert run_cli("train-mvae", "--reference", tmp_path / "none", "--out", tmp_path / "m.ckpt")[0] == 2
    assert run_cli("build-clusters", "--mvae", tmp_path / "none.ckpt", "--reference", p["ref"],
                   "--out", tmp_path / "c.ckpt")[0] == 2
    # a cluster model where the MVAE belongs
    code, _, err = run_cli("build-clusters", "--mvae", p["clusters"], "--reference", p["ref"],
                           "--out", tmp_path / "c.ckpt")
    assert code == 2 and "expected a 'mvae'" in err
    # a different MVAE than the one the clusters were built from
    other = tmp_path / "other.ckpt"
    code, _, _ = run_cli("train-mvae", "--reference", p["ref"], "--out", other, "--epochs", 1)
    assert code == 0
    code, _, err = run_cli("train-policy", "--mvae", other, "--clusters", p["clusters"], "--out",
                           tmp_path / "p.ckpt")
    assert code == 2 and "does not match" in err
    bad = tmp_path / "ref"
    shutil.copytree(p["ref"], bad)
    next((bad / "frames").iterdir()).write_bytes(b"P5\n32 32\n255\n" + b"\x07" * 100)
    assert run_cli("train-mvae", "--reference", bad, "--out", tmp_path / "m.ckpt")[0] == 2


def test_numeric_failure(smoke_run, tmp_path):
    cfg = tmp_path / "nan.yaml"
    cfg.write_text(SMOKE.read_text().replace("  epochs: 3\n", "  epochs: 3\n  lr: 1.0e+12\n"))
    code, _, err = run_cli("train-mvae", "--config", cfg, "--reference", smoke_run["ref"], "--out",
                           tmp_path / "m.ckpt")
    assert code == 3 and "numeric" in err
    assert not (tmp_path / "m.ckpt").exists()


def test_embedding_export(smoke_run, tmp_path):
    code, _, _ = run_cli("export-embedding", "--clusters", smoke_run["clusters"], "--mvae", smoke_run["mvae"],
                         "--method", "pca", "--out", tmp_path / "e.csv")
    assert code == 0
    rows = list(csv.reader((tmp_path / "e.csv").open()))
    assert rows[0] == ["x", "y", "cluster"] and len(rows) == 11
    assert np.isfinite(np.array(rows[1:], dtype=float)).all()

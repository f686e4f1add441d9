"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or config error, 2 missing or mismatched
artifact, 3 numeric failure. ``CBIL_LOG_LEVEL`` sets the log verbosity.

Without ``--config`` a stage reuses the resolved config stored in its parent
artifact, so a chain of commands only needs the config once.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, load_module_tensors
from .cluster import ClusterModel, write_cluster_json, write_reduced_csv
from .config import ConfigError, EngineConfig, dump_config, load_config, parse_config, with_seed
from .controllers import Pattern, scripted_reference_controller
from .discriminator import Discriminator, PairStandardizer, style_reward
from .metrics import MetricReport, apd, export_embedding, fid, js_divergence, task_return
from .mvae import encode_frames, write_curve
from .observation import CLIP_LEN, PGMError, load_segmented_frames, rasterize_silhouettes, write_frames
from .pipeline import (MissingArtifact, _state_clips, evaluate, fit_clusters, fit_mvae, load_clusters, load_mvae,
                       load_policy, load_reference_archive, make_trainer, mvae_clips, random_footage,
                       reference_footage, reference_latents, resume_trainer, rollout_records, save_clusters,
                       save_mvae, save_policy, write_jsonl, write_reference_archive)
from .sim import state_from_records
from .trainer import latent_pairs, random_actions, write_log

log = logging.getLogger("cbil")

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config resolution

def _parent_config_text(path) -> str | None:
    """Config text stored in a reference archive or a checkpoint."""
    if path is None or not os.path.exists(path):
        return None
    if os.path.isdir(path):
        manifest = os.path.join(path, "manifest.json")
        if not os.path.exists(manifest):
            return None
        with open(manifest) as fh:
            return json.load(fh).get("config")
    return load_checkpoint(path).config_text or None


def _resolve(args, parent=None, **section_overrides) -> tuple[EngineConfig, str]:
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg, _ = load_config(args.config)
    else:
        text = _parent_config_text(parent)
        cfg = parse_config(text) if text else EngineConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    for section, fields in section_overrides.items():
        fields = {k: v for k, v in fields.items() if v is not None}
        if fields:
            try:
                cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **fields)})
            except ValueError as exc:
                raise UsageError(str(exc)) from None
    text = dump_config(cfg)
    print(f"# resolved config (seed {cfg.seed})")
    print(text, end="" if text.endswith("\n") else "\n", flush=True)
    return cfg, text


# ---------------------------------------------------------------- stages

def cmd_gen_reference(args) -> int:
    cfg, text = _resolve(args, reference={"pattern": args.pattern, "steps": args.steps,
                                          "random_steps": args.random_steps})
    frames, records = reference_footage(cfg, keep_records=args.records)
    manifest = write_reference_archive(args.out, cfg, text, frames, records if args.records else None)
    rnd = random_footage(cfg)
    if len(rnd):
        write_frames(os.path.join(args.out, "random"), list(rnd))
    print(f"wrote {manifest['clip_count']} clips ({manifest['frame_count']} frames, "
          f"{len(rnd)} random frames) to {args.out}")
    return EXIT_OK


def cmd_train_mvae(args) -> int:
    cfg, text = _resolve(args, parent=args.reference, mvae={"epochs": args.epochs})
    ref, _ = load_reference_archive(args.reference)
    rdir = os.path.join(args.reference, "random")
    loaded = load_segmented_frames(rdir) if os.path.isdir(rdir) else []
    rnd = np.stack([f.bits for f in loaded]) if loaded else np.zeros((0,) + ref.shape[1:], np.uint8)
    clips = mvae_clips(cfg, ref, rnd)
    curve: list = []
    model = fit_mvae(cfg, clips, curve)
    if not np.isfinite(curve[-1]["total"]):
        raise FloatingPointError("MVAE loss diverged")
    digest = save_mvae(args.out, model, text, curve)
    if args.curve:
        write_curve(args.curve, curve)
    print(f"MVAE trained on {len(clips)} clips: recon {curve[-1]['recon']:.6f} kl {curve[-1]['kl']:.4f}")
    print(f"wrote {args.out} sha256 {digest}")
    return EXIT_OK


def cmd_build_clusters(args) -> int:
    cfg, text = _resolve(args, parent=args.mvae)
    model = load_mvae(args.mvae)
    ref, _ = load_reference_archive(args.reference)
    latents = reference_latents(model, ref)
    clusters = fit_clusters(cfg, latents)
    digest = save_clusters(args.out, clusters, text, args.mvae)
    if args.json:
        write_cluster_json(args.json, clusters)
    if args.csv and clusters.reduced is not None:
        write_reduced_csv(args.csv, clusters.reduced, clusters.labels)
    print(f"K={clusters.k} weights={np.round(clusters.weights, 4).tolist()} from {len(latents)} reference latents")
    print(f"wrote {args.out} sha256 {digest}")
    return EXIT_OK


class _Stop(Exception):
    pass


def cmd_train_policy(args) -> int:
    cfg, text = _resolve(args, parent=args.resume or args.clusters, train={"total_steps": args.steps})
    mvae = load_mvae(args.mvae)
    clusters = load_clusters(args.clusters, args.mvae)
    trainer = make_trainer(cfg, mvae, clusters, True if args.no_clustering else None)
    if args.resume:
        _, ckpt = load_policy(args.resume, args.mvae, args.clusters)
        if bool(ckpt.meta["train_config"]["no_clustering"]) != trainer.cfg.no_clustering:
            raise CheckpointError(f"{args.resume} was trained with a different clustering setting")
        resume_trainer(trainer, ckpt)
        print(f"resumed at iteration {trainer.iteration}")

    def callback(tr, row):
        print(f"iter {row['iteration']:3d} steps {row['steps']:7d} total {row['mean_total']:.4f} "
              f"style {row['mean_style']:.4f} task {row['mean_task']:.4f} js {row['js_rollout']:.4f}", flush=True)
        if not (np.isfinite(row["mean_total"]) and np.isfinite(row["policy_loss"])):
            raise FloatingPointError(f"non-finite training statistics at iteration {row['iteration']}")
        if args.checkpoint_every and tr.iteration % args.checkpoint_every == 0:
            save_policy(args.out, tr, text, args.mvae, args.clusters)
        if args.stop_after is not None and tr.iteration >= args.stop_after:
            raise _Stop()

    try:
        trainer.train(callback)
    except _Stop:
        pass
    digest = save_policy(args.out, trainer, text, args.mvae, args.clusters)
    if args.log:
        write_log(args.log, trainer.history)
    print(f"wrote {args.out} sha256 {digest}")
    return EXIT_OK


# ---------------------------------------------------------------- rollout and evaluation

def _actor(args, cfg: EngineConfig):
    if args.controller == "policy":
        return None
    if args.controller == "random":
        return random_actions
    try:
        pattern = Pattern.parse(args.controller)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return lambda env, rng: scripted_reference_controller(env, pattern, cfg.rewards)


def _rollout(args, cfg: EngineConfig, mvae, clusters):
    """Evaluation rollout plus per-pair style rewards when a discriminator is available."""
    actor = _actor(args, cfg)
    policy = ckpt = None
    if args.policy:
        policy, ckpt = load_policy(args.policy, args.mvae, args.clusters)
    if actor is None and policy is None:
        raise UsageError("--policy is required with --controller policy")
    env_cfg = dataclasses.replace(cfg.sim, n_agents=args.agents) if args.agents else cfg.sim
    ev = evaluate(cfg, policy if actor is None else None, mvae, clusters, ticks=args.ticks, seed=args.rollout_seed,
                  deterministic=not args.stochastic, actor=actor, env_cfg=env_cfg, keep_records=True)
    style = None
    if ckpt is not None and len(ev.batch.latents) >= 2:
        tc = ckpt.meta["train_config"]
        disc = Discriminator(mvae.cfg.latent_dim, tuple(tc["disc"]["hidden"]))
        load_module_tensors(disc, ckpt.tensors, "disc.")
        model = ClusterModel.uniform(clusters.anchors) if tc["no_clustering"] else clusters
        std = PairStandardizer.fit(latent_pairs(clusters.anchors).astype(np.float32))
        pairs = latent_pairs(ev.batch.latents)
        j = pairs.shape[1] // 2
        style = style_reward(disc.eval(), model, pairs[:, :j], pairs[:, j:], std)
    return ev, style


def _ticks(records) -> list[list[dict]]:
    by_t: dict[int, list] = {}
    for r in records:
        by_t.setdefault(int(r["t"]), []).append(r)
    return [sorted(by_t[t], key=lambda r: r["id"]) for t in sorted(by_t)]


def _render_records(records, cfg: EngineConfig) -> np.ndarray:
    frames = [rasterize_silhouettes(state_from_records(tick, cfg.sim), cfg.camera).bits for tick in _ticks(records)]
    return np.stack(frames) if frames else np.zeros((0, cfg.camera.height, cfg.camera.width), np.uint8)


def _records_latents(records, cfg: EngineConfig, mvae) -> np.ndarray:
    frames = _render_records(records, cfg)
    n_win = len(frames) // CLIP_LEN
    clips = frames[: n_win * CLIP_LEN].reshape(n_win, CLIP_LEN, *frames.shape[1:])
    return encode_frames(mvae, clips.astype(np.float32))


def _read_jsonl(path) -> list[dict]:
    if not os.path.exists(path):
        raise MissingArtifact(f"trajectory file not found: {path}")
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise UsageError(f"{path} holds no records")
    return records


def cmd_rollout(args) -> int:
    cfg, _ = _resolve(args, parent=args.policy or args.clusters)
    mvae = load_mvae(args.mvae)
    clusters = load_clusters(args.clusters, args.mvae)
    ev, style = _rollout(args, cfg, mvae, clusters)
    records = rollout_records(ev.batch, cfg, style)
    if style is None:
        # without a discriminator only the simulator-side terms are meaningful
        for rec in records:
            del rec["rw"]["style"], rec["rw"]["total"]
    digest = write_jsonl(args.out, records)
    if args.frames:
        write_frames(args.frames, list(_render_records(records, cfg)))
    print(f"task return {ev.task_mean:.4f} +- {ev.task_std:.4f}  js {ev.js:.4f}")
    print(f"wrote {len(records)} records to {args.out} sha256 {digest}")
    return EXIT_OK


def _records_task(records) -> tuple[float | None, float | None]:
    if any("task" not in r.get("rw", {}) for r in records):
        return None, None
    ticks = _ticks(records)
    r = np.array([[rec["rw"]["task"] for rec in tick] for tick in ticks])
    d = np.array([[bool(rec["done"]) for rec in tick] for tick in ticks])
    return task_return(r, d)


def _records_apd(records) -> tuple[float | None, float | None]:
    vals = [apd(c) for c in _state_clips(records, CLIP_LEN) if len(c) >= 2]
    return (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)


def cmd_eval(args) -> int:
    cfg, _ = _resolve(args, parent=args.policy or args.clusters)
    mvae = load_mvae(args.mvae)
    clusters = load_clusters(args.clusters, args.mvae)
    if args.trajectory:
        records = _read_jsonl(args.trajectory)
        task = _records_task(records)
    else:
        ev, _ = _rollout(args, cfg, mvae, clusters)
        records, task = ev.records, (ev.task_mean, ev.task_std)
    latents = _records_latents(records, cfg, mvae)
    ref = _records_latents(_read_jsonl(args.against), cfg, mvae) if args.against else clusters.anchors
    if len(latents) == 0 or len(ref) == 0:
        raise UsageError("trajectory is shorter than one clip window")
    apd_mean, apd_std = _records_apd(records)
    rep = MetricReport(
        fid=fid(latents, ref) if len(latents) >= 2 and len(ref) >= 2 else None,
        js=js_divergence(latents, ref, clusters, cfg.metrics.js_smoothing),
        apd_mean=apd_mean, apd_std=apd_std, task_return_mean=task[0], task_return_std=task[1],
        config={"task": cfg.train.task, "seed": cfg.seed, "windows": int(len(latents)),
                "against": os.path.basename(args.against) if args.against else "reference"})
    text = rep.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_export_embedding(args) -> int:
    cfg, _ = _resolve(args, parent=args.clusters)
    clusters = load_clusters(args.clusters, args.mvae)
    method = args.method or cfg.metrics.embedding_method
    pts = export_embedding(args.out, clusters.anchors, clusters.labels, method, cfg.seed)
    print(f"wrote {len(pts)} points ({method}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cbil", description="Collective behaviour imitation pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="YAML config (defaults to the parent artifact's config)")
        sp.add_argument("--seed", type=int, default=None, help="override the global seed")
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads")

    sp = sub.add_parser("gen-reference", help="scripted reference footage to a PGM archive")
    common(sp)
    sp.add_argument("--out", required=True, help="archive directory")
    sp.add_argument("--pattern", default=None, help="override reference.pattern")
    sp.add_argument("--steps", type=int, default=None, help="override reference.steps")
    sp.add_argument("--random-steps", type=int, default=None, help="override reference.random_steps")
    sp.add_argument("--records", action="store_true", help="also write trajectory.jsonl")
    sp.set_defaults(func=cmd_gen_reference)

    sp = sub.add_parser("train-mvae", help="train the masked video autoencoder")
    common(sp)
    sp.add_argument("--reference", required=True, help="archive directory from gen-reference")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--curve", default=None, help="CSV of per-epoch losses")
    sp.set_defaults(func=cmd_train_mvae)

    sp = sub.add_parser("build-clusters", help="cluster the reference latents")
    common(sp)
    sp.add_argument("--mvae", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--json", default=None, help="K, weights and centres as JSON")
    sp.add_argument("--csv", default=None, help="2-d reduced points with labels")
    sp.set_defaults(func=cmd_build_clusters)

    sp = sub.add_parser("train-policy", help="imitation training of the shared policy")
    common(sp)
    sp.add_argument("--mvae", required=True)
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    sp.add_argument("--no-clustering", action="store_true", help="K=1 uniform-weight ablation")
    sp.add_argument("--resume", default=None, help="policy checkpoint to continue from")
    sp.add_argument("--checkpoint-every", type=int, default=0, help="save every N iterations")
    sp.add_argument("--stop-after", type=int, default=None, help="stop once this many iterations are done")
    sp.add_argument("--log", default=None, help="per-iteration CSV log")
    sp.set_defaults(func=cmd_train_policy)

    def rollout_args(sp):
        sp.add_argument("--mvae", required=True)
        sp.add_argument("--clusters", required=True)
        sp.add_argument("--policy", default=None)
        sp.add_argument("--controller", default="policy",
                        help="policy, random or a scripted pattern name such as ClockwiseCircle")
        sp.add_argument("--ticks", type=int, default=None, help="defaults to metrics.eval_ticks")
        sp.add_argument("--agents", type=int, default=None, help="number of agents at inference")
        sp.add_argument("--rollout-seed", type=int, default=None, help="defaults to seed + metrics.eval_seed_offset")
        sp.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")

    sp = sub.add_parser("rollout", help="run a controller and write trajectory JSONL")
    common(sp)
    rollout_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", default=None, help="also write rendered PGM frames here")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("eval", help="metric report for a trajectory file or a fresh rollout")
    common(sp)
    rollout_args(sp)
    sp.add_argument("--trajectory", default=None, help="score this JSONL instead of rolling out")
    sp.add_argument("--against", default=None, help="compare with this JSONL instead of the reference latents")
    sp.add_argument("--out", default=None, help="report JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-embedding", help="2-d embedding of the reference latents")
    common(sp)
    sp.add_argument("--mvae", default=None, help="verify the cluster model against this MVAE")
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--method", choices=("tsne", "pca"), default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_embedding)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CBIL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, PGMError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Imitation training loop: rollouts, latent encoding, discriminator and PPO updates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .cluster import ClusterModel
from .discriminator import DiscConfig, Discriminator, PairStandardizer, ReplayBuffer, disc_forward, style_reward, \
    update_discriminator
from .metrics import js_divergence, task_return
from .mvae import MVAE, encode_frames
from .observation import CLIP_LEN, CameraSpec, rasterize_silhouettes
from .rewards import RewardConfig, bio_reward_batch, normalize_task, task_bounds, task_reward_batch
from .rl import OBS_DIM, GaussianPolicy, PPOConfig, ValueNet, build_observations, compute_gae, ppo_update, \
    policy_forward, sample_action
from .sim import EnvConfig, EnvState, init_environment, step_environment, trajectory_records

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "steps", "mean_total", "mean_style", "mean_bio", "mean_task", "disc_loss", "gp",
               "score_ref", "score_pol", "policy_loss", "value_loss", "mean_episode_length", "js_rollout")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "circling"
    total_steps: int = 50_000  # agent transitions (ticks x agents)
    horizon: int = 100
    gamma: float = 0.99
    lam: float = 0.99
    policy_hidden: tuple = (1024, 1024, 1024, 512)
    value_hidden: tuple = (128, 128, 128, 128)
    log_std: float = -1.0
    ppo: PPOConfig = field(default_factory=PPOConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    no_clustering: bool = False
    seed: int = 0


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, N, OBS_DIM)
    act: np.ndarray  # (T, N, 3) raw normalised samples
    logp: np.ndarray  # (T, N)
    r_bio: np.ndarray  # (T, N)
    r_task: np.ndarray  # (T, N) normalised
    dones: np.ndarray  # (T, N)
    last_obs: np.ndarray  # (N, OBS_DIM)
    latents: np.ndarray  # (W, J)
    env: EnvState
    records: list = field(default_factory=list)

    @property
    def pairs(self) -> np.ndarray:
        return np.concatenate([self.latents[:-1], self.latents[1:]], axis=1)

    @property
    def steps(self) -> int:
        return int(self.dones.size)


def latent_pairs(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents)
    return np.concatenate([latents[:-1], latents[1:]], axis=1)


def random_actions(env: EnvState, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws inside the action bounds, one row per alive agent."""
    lim = env.config.bounds.as_array()
    return rng.uniform(-lim, lim, size=(int(env.alive.sum()), 3))


def collect_rollouts(env: EnvState, policy: GaussianPolicy | None, mvae: MVAE | None, task: str, horizon: int,
                     camera: CameraSpec, rng: np.random.Generator, reward_cfg: RewardConfig = RewardConfig(),
                     deterministic: bool = False, actor=None, keep_records: bool = False) -> RolloutBatch:
    """Step the shared policy for ``horizon`` ticks and encode the rendered clips.

    ``actor(env, rng)`` replaces the policy when given (scripted or random
    baselines); its actions are then stored normalised with zero log-prob.
    """
    n = env.n
    lim = env.config.bounds.as_array()
    lo, hi = task_bounds(task, reward_cfg, env.cage, env.roles)
    obs = np.zeros((horizon, n, OBS_DIM))
    act = np.zeros((horizon, n, 3))
    logp = np.zeros((horizon, n))
    r_bio = np.zeros((horizon, n))
    r_task = np.zeros((horizon, n))
    dones = np.zeros((horizon, n), dtype=bool)
    frames = np.zeros((horizon, camera.height, camera.width), dtype=np.uint8)
    records = []
    for t in range(horizon):
        o = build_observations(env, task, reward_cfg)
        obs[t] = o
        if actor is None:
            mean, log_std = policy_forward(policy, o)
            a_norm, raw, lp = sample_action(mean, log_std, rng, deterministic)
            act[t], logp[t] = raw, lp
        else:
            a_norm = np.clip(np.asarray(actor(env, rng)) / lim, -1.0, 1.0)
            act[t] = a_norm
        nxt, done = step_environment(env, a_norm * lim)
        bio = bio_reward_batch(env, a_norm, nxt, reward_cfg)
        task_n = normalize_task(task_reward_batch(task, nxt, reward_cfg), lo, hi)
        # a terminated transition earns nothing from the task or the regulariser
        r_bio[t] = np.where(done, 0.0, bio)
        r_task[t] = np.where(done, 0.0, task_n)
        dones[t] = done
        if keep_records:
            records.extend(trajectory_records(nxt, done))
        env = nxt
        frames[t] = rasterize_silhouettes(env, camera).bits
    n_win = horizon // CLIP_LEN
    clips = frames[: n_win * CLIP_LEN].reshape(n_win, CLIP_LEN, camera.height, camera.width)
    latents = encode_frames(mvae, clips.astype(np.float32)) if mvae is not None else np.zeros((n_win, 0))
    return RolloutBatch(obs, act, logp, r_bio, r_task, dones, build_observations(env, task, reward_cfg),
                        latents, env, records)


def window_style(pair_rewards: np.ndarray, horizon: int) -> np.ndarray:
    """Per-tick style reward: window w holds pair max(w-1, 0), the tail holds the last pair."""
    w = np.minimum(np.arange(horizon) // CLIP_LEN, len(pair_rewards))
    return pair_rewards[np.maximum(w - 1, 0)]


def env_to_json(env: EnvState) -> dict:
    return {"positions": env.positions.tolist(), "forwards": env.forwards.tolist(),
            "rotations": env.rotations.tolist(), "speeds": env.speeds.tolist(), "roles": env.roles.tolist(),
            "alive": env.alive.tolist(), "cooldown": env.cooldown.tolist(), "food": env.food.tolist(),
            "time_step": env.time_step, "rng": env.rng.bit_generator.state}


def env_from_json(data: dict, config: EnvConfig) -> EnvState:
    env = init_environment(config, 0)
    env.positions = np.array(data["positions"], dtype=np.float64)
    env.forwards = np.array(data["forwards"], dtype=np.float64)
    env.rotations = np.array(data["rotations"], dtype=np.float64)
    env.speeds = np.array(data["speeds"], dtype=np.float64)
    env.roles = np.array(data["roles"], dtype=env.roles.dtype)
    env.alive = np.array(data["alive"], dtype=bool)
    env.cooldown = np.array(data["cooldown"], dtype=env.cooldown.dtype)
    env.food = np.array(data["food"], dtype=np.float64).reshape(-1, 3)
    env.time_step = int(data["time_step"])
    env.rng.bit_generator.state = data["rng"]
    return env


class CbilTrainer:
    """Holds every mutable piece of an imitation run so it can be checkpointed and resumed."""

    def __init__(self, cfg: TrainConfig, env_cfg: EnvConfig, camera: CameraSpec, mvae: MVAE,
                 cluster: ClusterModel, reference_latents: np.ndarray, reward_cfg: RewardConfig = RewardConfig()):
        if cfg.horizon < 2 * CLIP_LEN:
            raise ValueError(f"horizon must cover at least two clip windows ({2 * CLIP_LEN} ticks)")
        if (camera.height, camera.width) != (mvae.cfg.height, mvae.cfg.width):
            raise ValueError("camera resolution does not match the MVAE input size")
        self.cfg, self.env_cfg, self.camera, self.reward_cfg = cfg, env_cfg, camera, reward_cfg
        self.mvae = mvae
        self.full_cluster = cluster
        ref = np.asarray(reference_latents, dtype=np.float64)
        self.reference_latents = ref
        self.cluster = ClusterModel.uniform(cluster.anchors) if cfg.no_clustering else cluster
        self.ref_pairs = latent_pairs(ref).astype(np.float32)
        if len(self.ref_pairs) == 0:
            raise ValueError("need at least two reference latents to form transitions")
        # the discriminator works on reference-standardised pairs
        self.standardize = PairStandardizer.fit(self.ref_pairs)
        self.ref_pairs_std = self.standardize(self.ref_pairs).astype(np.float32)
        # value targets are learned in units of the discounted-return horizon
        self.value_scale = 1.0 / (1.0 - cfg.gamma)
        torch.manual_seed(cfg.seed)
        self.policy = GaussianPolicy(OBS_DIM, cfg.policy_hidden, log_std=cfg.log_std)
        self.value = ValueNet(OBS_DIM, cfg.value_hidden)
        latent_dim = ref.shape[1]
        self.disc = Discriminator(latent_dim, cfg.disc.hidden)
        self.opt_pi = torch.optim.Adam([p for p in self.policy.parameters() if p.requires_grad], lr=cfg.ppo.lr_policy)
        self.opt_v = torch.optim.Adam(self.value.parameters(), lr=cfg.ppo.lr_value)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.disc.lr)
        self.buffer = ReplayBuffer(2 * latent_dim, cfg.disc.buffer_capacity)
        self.rng = np.random.default_rng([cfg.seed, 11])
        self.env = init_environment(env_cfg, cfg.seed)
        self.ages = np.zeros(env_cfg.n_agents, dtype=np.int64)
        self.iteration = 0
        self.steps = 0
        self.history: list[dict] = []

    @property
    def n_iterations(self) -> int:
        per = self.cfg.horizon * self.env_cfg.n_agents
        return max(1, -(-self.cfg.total_steps // per))

    def style_rewards(self, pairs: np.ndarray, cluster: ClusterModel | None = None) -> np.ndarray:
        j = pairs.shape[1] // 2
        return style_reward(self.disc, cluster or self.cluster, pairs[:, :j], pairs[:, j:], self.standardize)

    def _episode_lengths(self, dones: np.ndarray) -> float:
        lengths = []
        for t in range(len(dones)):
            self.ages += 1
            ended = dones[t]
            lengths.extend(self.ages[ended].tolist())
            self.ages[ended] = 0
        return float(np.mean(lengths)) if lengths else float(self.ages.mean())

    def iterate(self) -> dict:
        cfg = self.cfg
        batch = collect_rollouts(self.env, self.policy, self.mvae, cfg.task, cfg.horizon, self.camera, self.rng,
                                 self.reward_cfg)
        self.env = batch.env
        pol_pairs = batch.pairs.astype(np.float32)
        self.buffer.add(pol_pairs)

        dstats = {}
        for _ in range(cfg.disc.updates_per_iter):
            ref = self.ref_pairs_std[self.rng.integers(len(self.ref_pairs_std), size=cfg.disc.batch_size)]
            pol = self.standardize(self.buffer.sample(cfg.disc.batch_size, self.rng))
            dstats = update_discriminator(self.disc, self.opt_d, ref, pol, cfg.disc.w_gp)

        r_style = np.broadcast_to(window_style(self.style_rewards(pol_pairs), cfg.horizon)[:, None],
                                  batch.r_task.shape)
        rw = self.reward_cfg
        total = rw.w_style * r_style + rw.w_bio * batch.r_bio + rw.w_task * batch.r_task

        t_len, n = batch.dones.shape
        obs_t = torch.as_tensor(batch.obs.reshape(-1, OBS_DIM), dtype=torch.float32)
        with torch.no_grad():
            values = self.value_scale * self.value(obs_t).double().numpy().reshape(t_len, n)
            last_v = self.value_scale * self.value(torch.as_tensor(batch.last_obs, dtype=torch.float32)).double().numpy()
        adv, ret = compute_gae(total, np.concatenate([values, last_v[None]]), batch.dones, cfg.gamma, cfg.lam)
        ppo_batch = {
            "obs": obs_t,
            "act": torch.as_tensor(batch.act.reshape(-1, 3), dtype=torch.float32),
            "logp": torch.as_tensor(batch.logp.reshape(-1), dtype=torch.float32),
            "adv": torch.as_tensor(adv.reshape(-1), dtype=torch.float32),
            "ret": torch.as_tensor(ret.reshape(-1) / self.value_scale, dtype=torch.float32),
        }
        pstats = ppo_update(self.policy, self.value, self.opt_pi, self.opt_v, ppo_batch, cfg.ppo, self.rng)

        self.steps += batch.steps
        row = {
            "iteration": self.iteration, "steps": self.steps,
            "mean_total": float(total.mean()), "mean_style": float(r_style.mean()),
            "mean_bio": float(batch.r_bio.mean()), "mean_task": float(batch.r_task.mean()),
            "disc_loss": dstats.get("disc_loss", float("nan")), "gp": dstats.get("gp", float("nan")),
            "score_ref": dstats.get("score_ref", float("nan")), "score_pol": dstats.get("score_pol", float("nan")),
            "policy_loss": pstats["policy_loss"], "value_loss": pstats["value_loss"],
            "mean_episode_length": self._episode_lengths(batch.dones),
            "js_rollout": js_divergence(batch.latents, self.reference_latents, self.full_cluster),
        }
        self.last_ppo = pstats
        self.last_rewards = {"style": r_style, "bio": batch.r_bio, "task": batch.r_task, "total": total}
        self.history.append(row)
        self.iteration += 1
        log.info("iter %d steps %d total %.4f style %.4f task %.4f disc %.4f", row["iteration"], row["steps"],
                 row["mean_total"], row["mean_style"], row["mean_task"], row["disc_loss"])
        return row

    def train(self, callback=None) -> list[dict]:
        while self.iteration < self.n_iterations:
            row = self.iterate()
            if callback is not None:
                callback(self, row)
        return self.history

    # ------------------------------------------------------------ persistence

    def state_tensors(self) -> tuple[dict, dict]:
        from .checkpoint import module_tensors, optimizer_tensors

        tensors = {}
        tensors.update(module_tensors(self.policy, "policy."))
        tensors.update(module_tensors(self.value, "value."))
        tensors.update(module_tensors(self.disc, "disc."))
        steps = {}
        for name, opt in (("opt_pi.", self.opt_pi), ("opt_v.", self.opt_v), ("opt_d.", self.opt_d)):
            t, s = optimizer_tensors(opt, name)
            tensors.update(t)
            steps[name] = s
        tensors["buffer"] = self.buffer.state()
        meta = {"iteration": self.iteration, "steps": self.steps, "ages": self.ages.tolist(),
                "env": env_to_json(self.env), "optimizer_steps": steps, "history": self.history}
        return tensors, meta

    def load_state(self, tensors: dict, meta: dict, rng_state: dict) -> None:
        from .checkpoint import load_module_tensors, load_optimizer_tensors

        load_module_tensors(self.policy, tensors, "policy.")
        load_module_tensors(self.value, tensors, "value.")
        load_module_tensors(self.disc, tensors, "disc.")
        for name, opt in (("opt_pi.", self.opt_pi), ("opt_v.", self.opt_v), ("opt_d.", self.opt_d)):
            load_optimizer_tensors(opt, tensors, meta["optimizer_steps"][name], name)
        self.buffer = ReplayBuffer(self.buffer.dim, self.buffer.capacity)
        if tensors["buffer"].size:
            self.buffer.add(tensors["buffer"])
        self.iteration, self.steps = int(meta["iteration"]), int(meta["steps"])
        self.ages = np.array(meta["ages"], dtype=np.int64)
        self.env = env_from_json(meta["env"], self.env_cfg)
        self.history = list(meta["history"])
        self.rng.bit_generator.state = rng_state["trainer"]

    def rng_state(self) -> dict:
        return {"trainer": self.rng.bit_generator.state}


def evaluate_policy(policy: GaussianPolicy | None, mvae: MVAE, task: str, env_cfg: EnvConfig, camera: CameraSpec,
                    ticks: int, seed: int, reward_cfg: RewardConfig = RewardConfig(), deterministic: bool = True,
                    actor=None, keep_records: bool = False) -> RolloutBatch:
    """Fresh-environment rollout used for task return and latent statistics."""
    env = init_environment(env_cfg, seed)
    return collect_rollouts(env, policy, mvae, task, ticks, camera, np.random.default_rng([seed, 5]), reward_cfg,
                            deterministic=deterministic, actor=actor, keep_records=keep_records)


def rollout_task_return(batch: RolloutBatch) -> tuple[float, float]:
    return task_return(batch.r_task, batch.dones)


def disc_scores(disc: Discriminator, pairs: np.ndarray, standardize: PairStandardizer | None = None) -> np.ndarray:
    if standardize is not None:
        pairs = standardize(pairs)
    j = pairs.shape[1] // 2
    return disc_forward(disc, pairs[:, :j], pairs[:, j:])


def write_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in LOG_COLUMNS) + "\n")

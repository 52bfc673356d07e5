"""PPO with the blended agent: rollouts, GAE, losses and the two-stage trainer."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import HybridAgent, blender_entropy, load_checkpoint, policy_entropy, save_checkpoint
from .concepts import anneal_factor, build_grid, concept_alignment_loss
from .config import Setup, TrainConfig, check_trainable
from .errors import EnvError, TrainingError

ADV_STD_FLOOR = 1e-8


def worker_count():
    """Worker threads for environment stepping, from ``GRAIL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("GRAIL_THREADS", "1")))
    except ValueError:
        return 1


def episode_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutBuffer:
    obs: list  # [T][N] observations
    actions: np.ndarray  # (T, N)
    logp: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    betas: np.ndarray
    bootstrap: np.ndarray  # (N,) value after the last step

    @property
    def shape(self):
        return self.actions.shape


@dataclass
class EpisodeStats:
    returns: list = field(default_factory=list)
    goals: list = field(default_factory=list)


class Collector:
    """Owns the environments and steps them with the current agent."""

    def __init__(self, envs, agent: HybridAgent, seed, rng):
        self.envs = envs
        self.agent = agent
        self.seed = seed
        self.rng = rng
        self.episode_index = [0] * len(envs)
        self.scenes = [env.reset(episode_seed(seed, i, 0)) for i, env in enumerate(envs)]
        self.ep_return = np.zeros(len(envs))
        self.ep_goals = np.zeros(len(envs), dtype=np.int64)
        self.pool = ThreadPoolExecutor(worker_count()) if worker_count() > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _step_all(self, actions):
        def one(i):
            try:
                return self.envs[i].step(int(actions[i]))
            except EnvError as exc:
                raise TrainingError(f"environment {i} failed at episode "
                                    f"{self.episode_index[i]}: {exc}") from exc
        idx = range(len(self.envs))
        if self.pool is None:
            return [one(i) for i in idx]
        return list(self.pool.map(one, idx))

    def collect(self, T, stats: EpisodeStats) -> RolloutBuffer:
        N = len(self.envs)
        obs = []
        actions = np.zeros((T, N), dtype=np.int64)
        logp = np.zeros((T, N))
        rewards = np.zeros((T, N))
        dones = np.zeros((T, N))
        values = np.zeros((T, N))
        betas = np.zeros((T, N))
        for t in range(T):
            step_obs = [self.agent.observe(s) for s in self.scenes]
            with ad.no_grad():
                out = self.agent.forward(step_obs)
            probs = out.probs.data.astype(np.float64)
            a = sample_actions(probs, self.rng)
            chosen = probs[np.arange(N), a]
            if not np.all(np.isfinite(chosen)) or np.any(chosen <= 0):
                raise TrainingError(f"invalid action probabilities {chosen}")
            obs.append(step_obs)
            actions[t] = a
            logp[t] = np.log(out.probs.data[np.arange(N), a])
            values[t] = out.value.data
            betas[t] = out.beta.data
            for i, (scene, r, done, info) in enumerate(self._step_all(a)):
                rewards[t, i] = r
                dones[t, i] = float(done)
                self.ep_return[i] += r
                self.ep_goals[i] += info["goals"]
                if done:
                    stats.returns.append(float(self.ep_return[i]))
                    stats.goals.append(int(self.ep_goals[i]))
                    self.ep_return[i] = 0.0
                    self.ep_goals[i] = 0
                    self.episode_index[i] += 1
                    scene = self.envs[i].reset(episode_seed(self.seed, i, self.episode_index[i]))
                self.scenes[i] = scene
        with ad.no_grad():
            last = self.agent.forward([self.agent.observe(s) for s in self.scenes])
        return RolloutBuffer(obs, actions, logp, rewards, dones, values, betas,
                             last.value.data.astype(np.float64))


def sample_actions(probs, rng):
    """One categorical draw per row of ``probs``."""
    p = probs / probs.sum(axis=1, keepdims=True)
    u = rng.random(p.shape[0])
    return np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)


def collect_rollout(envs, agent, cfg: TrainConfig, rng=None, stats=None) -> RolloutBuffer:
    """Fresh-start rollout of ``cfg.rollout_len`` steps over ``envs``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    collector = Collector(envs, agent, cfg.seed, rng)
    try:
        return collector.collect(cfg.rollout_len, stats if stats is not None else EpisodeStats())
    finally:
        collector.close()


# ---------------------------------------------------------------- advantages


def gae(rewards, values, dones, bootstrap, gamma, lam):
    """Generalized advantage estimates over (T, N) arrays.

    ``dones[t]`` marks that the episode ended with step ``t``; no value or
    advantage flows back across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), ADV_STD_FLOOR)


# ---------------------------------------------------------------- losses


@dataclass
class Minibatch:
    obs: list
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class CoreLoss:
    clip: ad.Value  # surrogate objective, to be maximized
    vf: ad.Value
    entropy: ad.Value
    blend_entropy: ad.Value
    beta_mean: float
    approx_kl: float


def clipped_surrogate(ratio, adv, eps):
    """mean(min(r A, clip(r, 1 - eps, 1 + eps) A))."""
    adv = ad.as_value(adv, like=ratio)
    return ad.mean(ad.minimum(ad.mul(ratio, adv),
                              ad.mul(ad.clamp(ratio, 1.0 - eps, 1.0 + eps), adv)))


def ppo_core_loss(batch: Minibatch, agent: HybridAgent, cfg: TrainConfig) -> CoreLoss:
    out = agent.forward(batch.obs)
    B = len(batch.obs)
    chosen = ad.index(out.probs, (np.arange(B), np.asarray(batch.actions)))
    logp = ad.safe_log(chosen)
    old = np.asarray(batch.old_logp, dtype=logp.data.dtype)
    ratio = ad.exp(ad.sub(logp, old))
    if not np.all(np.isfinite(ratio.data)):
        bad = np.where(~np.isfinite(ratio.data))[0]
        raise TrainingError(f"nonfinite probability ratio at rows {bad.tolist()[:5]}: "
                            f"logp={logp.data[bad][:5]}, old={old[bad][:5]}")
    adv = normalize_advantages(batch.advantages).astype(logp.data.dtype)
    clip = clipped_surrogate(ratio, adv, cfg.clip_eps)
    err = ad.sub(out.value, np.asarray(batch.returns, dtype=logp.data.dtype))
    vf = ad.mean(ad.mul(err, err))
    ent = ad.mean(policy_entropy(out.probs))
    bent = ad.mean(blender_entropy(out.beta))
    kl = float(np.mean(old - logp.data))
    return CoreLoss(clip, vf, ent, bent, float(np.mean(out.beta.data)), kl)


def blendrl_loss(core: CoreLoss, cfg: TrainConfig) -> ad.Value:
    """c_VF L^VF - L^CLIP - c_AE H(pi) - c_BE H(beta)."""
    loss = ad.sub(ad.mul(core.vf, cfg.c_vf), core.clip)
    loss = ad.sub(loss, ad.mul(core.entropy, cfg.c_ae))
    return ad.sub(loss, ad.mul(core.blend_entropy, cfg.c_be))


def total_loss(batch, agent, cfg: TrainConfig, t, T, proxies=None, aligned=None, core=None):
    """BlendRL loss plus the annealed concept-alignment term."""
    core = core or ppo_core_loss(batch, agent, cfg)
    loss = blendrl_loss(core, cfg)
    if cfg.c_ca > 0:
        if not proxies or not aligned:
            raise TrainingError("c_ca > 0 needs proxies and an aligned predicate set")
        lca = concept_alignment_loss(agent.nets, proxies, build_grid(cfg.grid_k), aligned)
        loss = ad.add(loss, ad.mul(lca, anneal_factor(t, T, cfg.gamma_ca) * cfg.c_ca))
    return loss


# ---------------------------------------------------------------- training


def configure_stage(agent: HybridAgent, stage, groups=None):
    """Freeze and unfreeze parameter groups; returns the trainable list.

    ``groups`` defaults to the stage's groups (see :func:`check_trainable`).
    """
    groups = check_trainable(groups or [], stage)
    by_name = {"psi": agent.psi, "theta": agent.theta, "phi": agent.phi, "lambda": agent.lam,
               "critics": agent.critics}
    if stage == 1:
        # the neural critic never sees a nonzero beta in stage 1
        by_name["critics"] = agent.critic_log.parameters
    agent.set_trainable(agent.all_parameters(), False)
    agent.force_logic = stage == 1
    agent.stage = stage
    trainable = [p for g in groups for p in by_name[g]]
    agent.set_trainable(trainable, True)
    for p in trainable:
        p.zero_grad()
    return trainable


def build_agent(setup: Setup, stage, seed, spec=None) -> HybridAgent:
    spec = spec or setup.env_spec(stage)
    return HybridAgent(setup.decls, setup.policy, setup.blend, spec, setup.status_fns,
                       blend_mode=setup.config.agent.blend_mode, seed=seed)


def _f(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def train(cfg: TrainConfig, setup: Setup, out_dir, init_checkpoint=None, log=None):
    """Run one stage; writes metrics and checkpoints into ``out_dir``.

    Stage 1 trains the valuation nets (and the logic critic) with the neural
    path disabled. Stage 2 loads psi and phi from ``init_checkpoint``,
    freezes psi and trains theta, lambda, phi and the critics from scratch.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.stage == 2 and init_checkpoint is None:
        raise TrainingError("stage 2 starts from a stage-1 checkpoint")
    spec = setup.env_spec(cfg.stage)
    envs = [setup.make_env(cfg.stage) for _ in range(cfg.n_envs)]
    agent = build_agent(setup, cfg.stage, cfg.seed, spec)
    if init_checkpoint is not None:
        groups = ("psi/", "phi") if cfg.stage == 2 else None
        load_checkpoint(agent, init_checkpoint, groups=groups)
    trainable = configure_stage(agent, cfg.stage, setup.config.agent.trainable)
    align = cfg.stage == 1 and cfg.c_ca > 0
    if align and not setup.aligned:
        raise TrainingError("c_ca > 0 needs at least one aligned predicate")
    grid = build_grid(cfg.grid_k)
    opt = ad.Adam(trainable, lr=cfg.lr, horizon=cfg.iterations * cfg.epochs * cfg.minibatches)
    rng = np.random.default_rng([cfg.seed, 1])
    perm_rng = np.random.default_rng([cfg.seed, 2])
    collector = Collector(envs, agent, cfg.seed, rng)
    metrics_path = out / "metrics.ndjson"
    metrics_path.write_text("")
    steps = 0
    try:
        for it in range(cfg.iterations):
            stats = EpisodeStats()
            buf = collector.collect(cfg.rollout_len, stats)
            steps = min(steps + cfg.batch_size, cfg.total_steps)
            adv, ret = gae(buf.rewards, buf.values, buf.dones, buf.bootstrap, cfg.gamma,
                           cfg.gae_lambda)
            flat_obs = [o for row in buf.obs for o in row]
            flat = {"actions": buf.actions.ravel(), "logp": buf.logp.ravel(),
                    "adv": adv.ravel(), "ret": ret.ravel()}
            anneal = anneal_factor(steps, cfg.total_steps, cfg.gamma_ca)
            sums = {"clip": 0.0, "vf": 0.0, "ent": 0.0, "bent": 0.0, "kl": 0.0}
            n_mb = 0
            lca_value = None
            for _epoch in range(cfg.epochs):
                extra = None
                if align:
                    lca = concept_alignment_loss(agent.nets, setup.proxies, grid, setup.aligned)
                    ad.backward(lca)
                    lca_value = float(lca.data)
                    scale = anneal * cfg.c_ca
                    extra = {id(p): p.grad.astype(np.float64) * scale for p in agent.psi}
                    for p in agent.psi:
                        p.zero_grad()
                order = perm_rng.permutation(len(flat_obs))
                for idx in np.array_split(order, cfg.minibatches):
                    mb = Minibatch([flat_obs[i] for i in idx], flat["actions"][idx],
                                   flat["logp"][idx], flat["adv"][idx], flat["ret"][idx])
                    core = ppo_core_loss(mb, agent, cfg)
                    ad.backward(blendrl_loss(core, cfg))
                    opt.step(global_clip=cfg.grad_clip, extra_grads=extra)
                    sums["clip"] += float(core.clip.data)
                    sums["vf"] += float(core.vf.data)
                    sums["ent"] += float(core.entropy.data)
                    sums["bent"] += float(core.blend_entropy.data)
                    sums["kl"] += core.approx_kl
                    n_mb += 1
            if lca_value is None and setup.aligned:
                with ad.no_grad():
                    lca_value = float(concept_alignment_loss(agent.nets, setup.proxies, grid,
                                                             setup.aligned).data)
            record = {
                "iteration": it + 1,
                "step": steps,
                "episodes": len(stats.returns),
                "mean_return": _f(np.mean(stats.returns)) if stats.returns else None,
                "goals_per_episode": _f(np.mean(stats.goals)) if stats.goals else None,
                "l_ca": _f(lca_value),
                "l_clip": _f(sums["clip"] / n_mb),
                "l_vf": _f(sums["vf"] / n_mb),
                "entropy": _f(sums["ent"] / n_mb),
                "blend_entropy": _f(sums["bent"] / n_mb),
                "beta_mean": _f(np.mean(buf.betas)),
                "approx_kl": _f(sums["kl"] / n_mb),
                "anneal": _f(anneal),
                "lr": _f(opt.current_lr()),
            }
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if log is not None:
                log(record)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 \
                    and it + 1 < cfg.iterations:
                save_checkpoint(agent, out / f"ckpt_{steps}.grailck")
    finally:
        collector.close()
    final = out / f"ckpt_{steps}.grailck"
    save_checkpoint(agent, final)
    return agent, final


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    goals_per_episode: float
    completion_rate: float  # fraction of episodes with at least one goal
    returns: list
    goals: list

    def as_dict(self):
        return {"mean_return": self.mean_return, "std_return": self.std_return,
                "goals_per_episode": self.goals_per_episode,
                "completion_rate": self.completion_rate, "episodes": len(self.returns)}


def evaluate(agent: HybridAgent, make_env, episodes, mode="sampled", seed=0, batch=10):
    """Run ``episodes`` episodes; ``make_env()`` builds one environment.

    Episodes are played ``batch`` at a time with episode ``k`` seeded from
    ``(seed, k)``, so results depend only on the arguments.
    """
    if mode not in ("sampled", "greedy"):
        raise ValueError(f"mode must be 'sampled' or 'greedy', got {mode!r}")
    rng = np.random.default_rng([seed, 3])
    returns, goals = [], []
    for start in range(0, episodes, batch):
        ks = list(range(start, min(start + batch, episodes)))
        envs = [make_env() for _ in ks]
        scenes = [env.reset(episode_seed(seed, 7, k)) for env, k in zip(envs, ks)]
        R = np.zeros(len(ks))
        G = np.zeros(len(ks), dtype=np.int64)
        live = [not env.done for env in envs]
        while any(live):
            idx = [i for i in range(len(ks)) if live[i]]
            with ad.no_grad():
                out = agent.forward([agent.observe(scenes[i]) for i in idx])
            probs = out.probs.data.astype(np.float64)
            acts = probs.argmax(axis=1) if mode == "greedy" else sample_actions(probs, rng)
            for j, i in enumerate(idx):
                scenes[i], r, done, info = envs[i].step(int(acts[j]))
                R[i] += r
                G[i] += info["goals"]
                live[i] = not done
        returns += R.tolist()
        goals += G.tolist()
    if not returns:
        return EvalResult(0.0, 0.0, 0.0, 0.0, [], [])
    return EvalResult(float(np.mean(returns)), float(np.std(returns)), float(np.mean(goals)),
                      float(np.mean(np.asarray(goals) > 0)), returns, goals)

"""Finite-difference checks of every trainable network and of the full loss.

Each case builds a float64 graph from randomized parameters, then compares
autodiff gradients with central differences on a random subset of entries
per parameter array.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agent import HybridAgent, blend_policies, blender_entropy
from .concepts import ValuationNet, bce

CASES = ("valuation", "policy", "critics", "blender", "total_loss")


@dataclass
class CaseResult:
    case: str
    instance: int
    max_rel_error: float
    checked: int
    skipped: int
    failures: list
    max_abs_error_near_zero: float = 0.0


def _randomize(params, rng, scale=0.5):
    for p in params:
        p.data[...] = rng.normal(0.0, scale, size=p.data.shape)


def _valuation_case(rng):
    net = ValuationNet("p", rng)
    _randomize(net.parameters, rng)
    offsets = rng.uniform(-1, 1, size=(16, 2))
    target = rng.uniform(0, 1, size=16)
    return (lambda: ad.mean(bce(target, net(offsets)))), net.parameters


def _ladder_batch(rng, n=12):
    """A small ladderworld agent plus observations from a random rollout."""
    from .concepts import load_proxies
    from .envs import data_dir, fixture_path, load_env_spec
    from .envs.ladderworld import LadderWorld
    from .logiclang import load_decls, load_program

    data = data_dir()
    decls = load_decls(data / "decls" / "ladderworld.toml")
    policy = load_program(data / "programs" / "ladderworld" / "policy.pl", decls, "policy")
    blend = load_program(data / "programs" / "ladderworld" / "blend.pl", decls, "blend")
    spec = load_env_spec(fixture_path("ladderworld"), "full", action_repeat=4)
    agent = HybridAgent(decls, policy, blend, spec, LadderWorld.status_fns(),
                        blend_mode="logic", seed=int(rng.integers(1 << 31)))
    env = LadderWorld(spec)
    scene = env.reset(int(rng.integers(1 << 31)))
    obs = []
    while len(obs) < n:
        obs.append(agent.observe(scene))
        scene, _, done, _ = env.step(int(rng.integers(env.n_actions)))
        if done:
            scene = env.reset(int(rng.integers(1 << 31)))
    proxies = load_proxies(data / "proxies" / "ladderworld" / "wide")
    return agent, obs, proxies


def _policy_case(rng):
    agent, obs, _ = _ladder_batch(rng, 8)
    _randomize(agent.theta, rng)
    X = np.stack([o.features for o in obs])
    acts = rng.integers(len(agent.actions), size=len(obs))
    coef = rng.normal(size=len(obs))

    def loss():
        probs = ad.softmax(agent.actor(X))
        chosen = ad.index(probs, (np.arange(len(obs)), acts))
        return ad.mean(ad.mul(ad.log(chosen), coef))
    return loss, agent.theta


def _critics_case(rng):
    agent, obs, _ = _ladder_batch(rng, 8)
    _randomize(agent.critics, rng)
    X = np.stack([o.features for o in obs])
    S = np.stack([o.atom_features for o in obs])
    target = rng.normal(size=len(obs))

    def loss():
        v = ad.add(ad.reshape(agent.critic_neu(X), (-1,)),
                   ad.mul(ad.reshape(agent.critic_log(S), (-1,)), 0.7))
        err = ad.sub(v, target)
        return ad.mean(ad.mul(err, err))
    return loss, agent.critics


def _blender_case(rng):
    agent, obs, _ = _ladder_batch(rng, 8)
    _randomize(agent.blender.parameters, rng)
    agent.blend_weights.data[...] = rng.normal(size=agent.blend_weights.data.shape)
    X = np.stack([o.features for o in obs])
    pi_neu = rng.dirichlet(np.ones(len(agent.actions)), size=len(obs))
    pi_log = rng.dirichlet(np.ones(len(agent.actions)), size=len(obs))
    coef = rng.normal(size=pi_neu.shape)

    def loss():
        agent.blend_mode = "neural"
        b_neu = agent._beta(obs, ad.Value(X))
        agent.blend_mode = "logic"
        b_log = agent._beta(obs, ad.Value(X))
        total = ad.add(ad.mean(blender_entropy(b_neu)), ad.mean(blender_entropy(b_log)))
        mix = blend_policies(pi_neu, pi_log, ad.mul(ad.add(b_neu, b_log), 0.5))
        return ad.add(total, ad.mean(ad.mul(mix, coef)))
    return loss, agent.blender.parameters + [agent.blend_weights]


def _total_loss_case(rng):
    from .config import TrainConfig
    from .ppo import Minibatch, total_loss

    agent, obs, proxies = _ladder_batch(rng, 12)
    params = agent.all_parameters()
    _randomize(params, rng, 0.3)
    agent.force_logic = False
    cfg = TrainConfig(c_ca=0.3, gamma_ca=1.0, grid_k=7)
    B = len(obs)
    with ad.no_grad():
        probs = agent.forward(obs).probs.data
    acts = rng.integers(len(agent.actions), size=B)
    # old log-probs near the current ones so some ratios fall inside the clip range
    old = np.log(probs[np.arange(B), acts]) + rng.normal(0, 0.08, size=B)
    batch = Minibatch(obs, acts, old, rng.normal(size=B), rng.normal(size=B))
    aligned = list(agent.spatial)
    t = int(rng.integers(0, 1000))

    def loss():
        return total_loss(batch, agent, cfg, t, 1000, proxies, aligned)
    return loss, params


BUILDERS = {"valuation": _valuation_case, "policy": _policy_case, "critics": _critics_case,
            "blender": _blender_case, "total_loss": _total_loss_case}


def run_suite(instances=20, seed=0, cases=CASES, entries=4, h=1e-3, rtol=1e-4, log=None):
    """Run every case ``instances`` times; returns (results, seconds)."""
    start = time.perf_counter()
    results = []
    with ad.precision(np.float64):
        for case in cases:
            for k in range(instances):
                rng = np.random.default_rng([seed, CASES.index(case), k])
                loss_fn, params = BUILDERS[case](rng)
                for p in params:
                    p.requires_grad = True
                    p.zero_grad()
                rep = ad.check_gradients(loss_fn, params, h=h, rtol=rtol, max_entries=entries,
                                         rng=rng)
                res = CaseResult(case, k, rep["max_rel_error"], rep["checked"], rep["skipped"],
                                 rep["failures"], rep["max_abs_error_near_zero"])
                results.append(res)
                if log is not None:
                    log(res)
    return results, time.perf_counter() - start

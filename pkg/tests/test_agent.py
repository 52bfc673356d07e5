import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grail import autodiff as ad
from grail.agent import (HybridAgent, blend_policies, blender_beta, blender_entropy,
                         load_checkpoint, policy, policy_entropy, read_checkpoint,
                         save_checkpoint, value)
from grail.envs.base import Object, Scene
from grail.errors import CheckpointError, ConfigError
from grail.logiclang import make_decls, parse_program
from grail.reasoner import action_distribution, evaluate_atoms, forward_infer, ground

SPEC = SimpleNamespace(actions=["up", "right", "left"], slots={"agent": 1, "ladder": 2})
DECLS = make_decls({
    "up": {"kind": "action", "args": ["world"]},
    "right": {"kind": "action", "args": ["world"]},
    "left": {"kind": "action", "args": ["world"]},
    "neural_agent": {"kind": "blend", "args": ["world"]},
    "logic_agent": {"kind": "blend", "args": ["world"]},
    "left_of": {"kind": "spatial", "args": ["agent", "ladder"]},
    "near": {"kind": "spatial", "args": ["agent", "ladder"]},
    "true": {"kind": "status", "args": ["world"]},
})
STATUS = {"true": lambda scene: {("world",): 1.0}}
POLICY = "up(X) :- near(P,L).\nright(X) :- left_of(P,L).\nleft(X) :- true(X)."
SCENE = Scene([Object("agent", 20, 180), Object("ladder", 60, 180), Object("ladder", 100, 120)])


def make_agent(blend="logic_agent(X) :- true(X).", mode="logic", seed=0):
    prog = parse_program(POLICY, DECLS, "policy")
    bl = parse_program(blend, DECLS, "blend") if blend is not None else None
    agent = HybridAgent(DECLS, prog, bl, SPEC, STATUS, blend_mode=mode, seed=seed)
    for net in agent.nets.values():
        for p in net.parameters:
            p.data[...] = np.random.default_rng(seed + 3).normal(0, 0.2, p.shape)
    return agent


def test_blend_examples():
    a, b = ad.Value([0.2, 0.8]), ad.Value([0.6, 0.4])
    assert blend_policies(a, b, 1.0).data.tolist() == a.data.tolist()
    assert blend_policies(a, b, 0.0).data.tolist() == b.data.tolist()
    half = blend_policies(ad.Value([1.0, 0.0]), ad.Value([0.0, 1.0]), 0.5)
    assert half.data.tolist() == [0.5, 0.5]


def test_blender_entropy_examples():
    assert blender_entropy(0.5).item() == pytest.approx(math.log(2), rel=1e-6)
    assert blender_entropy(0.0).item() == pytest.approx(0.0, abs=1e-5)
    assert blender_entropy(0.25).item() == pytest.approx(0.5623351446188083, rel=1e-6)


def test_policy_entropy_uniform():
    assert policy_entropy(ad.Value([0.25] * 4)).item() == pytest.approx(math.log(4), rel=1e-6)


def test_logic_blender_true_rule_delegates_to_logic():
    agent = make_agent()
    agent.blend_weights.data[...] = 16.0
    assert blender_beta(SCENE, agent) == pytest.approx(0.0, abs=1e-7)


def test_logic_blender_both_heads_zero():
    # neither blend head is ever derivable without ladders
    agent = make_agent("neural_agent(X) :- near(P,L).\nlogic_agent(X) :- left_of(P,L).")
    assert blender_beta(Scene([Object("agent", 5, 5)]), agent) == 0.0


def test_neural_blender_starts_at_half():
    agent = make_agent(blend=None, mode="neural")
    assert blender_beta(SCENE, agent) == 0.5


def test_logic_mode_without_program_is_config_error():
    with pytest.raises(ConfigError):
        make_agent(blend=None, mode="logic")


def test_value_blending():
    agent = make_agent()
    v_neu = value(SCENE, agent, 1.0)
    v_log = value(SCENE, agent, 0.0)
    assert value(SCENE, agent, 0.25) == pytest.approx(0.25 * v_neu + 0.75 * v_log, rel=1e-6)
    # constant critics V_neu = 2, V_log = -2 through zeroed output weights
    for critic, c in ((agent.critic_neu, 2.0), (agent.critic_log, -2.0)):
        critic.parameters[-2].data[...] = 0.0
        critic.parameters[-1].data[...] = c
    assert value(SCENE, agent, 0.25) == -1.0
    assert value(SCENE, agent, 0.0) == -2.0 and value(SCENE, agent, 1.0) == 2.0


def test_policy_is_blend_of_parts():
    agent = make_agent(blend=None, mode="neural")
    pi, beta, pi_neu, pi_log = policy(SCENE, agent)
    np.testing.assert_allclose(pi, beta * pi_neu + (1 - beta) * pi_log, atol=1e-7)
    assert abs(pi.sum() - 1) <= 1e-6 and abs(pi_neu.sum() - 1) <= 1e-6


def test_stage1_equivalence_bit_identical():
    agent = make_agent()
    agent.force_logic = True
    agent.policy_weights.data[...] = np.array([0.3, -1.2, 2.0], dtype=np.float32)
    pi, beta, _, _ = policy(SCENE, agent)
    assert beta == 0.0
    with ad.no_grad():
        table = evaluate_atoms(SCENE, agent.policy_program, agent.nets, STATUS)
        heads = forward_infer(table, ground(agent.policy_program, SCENE), agent.policy_weights)
        ref = action_distribution(heads, agent.actions).data
    assert pi.tobytes() == ref.astype(pi.dtype).tobytes()


def test_forced_logic_gives_theta_no_gradient():
    agent = make_agent(blend=None, mode="neural")
    agent.force_logic = True
    out = agent.forward([agent.observe(SCENE)])
    ad.backward(ad.neg(ad.sum_(ad.safe_log(ad.index(out.probs, (0, 1))))))
    assert all(np.all(p.grad == 0) for p in agent.theta)
    assert any(np.any(p.grad != 0) for p in agent.psi)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0.001, 1), min_size=4, max_size=4),
       st.lists(st.floats(0.001, 1), min_size=4, max_size=4))
def test_blend_stays_on_simplex(beta, a, b):
    pa = np.asarray(a) / np.sum(a)
    pb = np.asarray(b) / np.sum(b)
    out = blend_policies(ad.Value(pa), ad.Value(pb), beta).data
    assert abs(out.sum() - 1) <= 1e-6 and np.all(out >= 0)
    h = blender_entropy(beta).item()
    assert 0 <= h <= math.log(2) + 1e-6


def test_blender_entropy_peak_by_sweep():
    betas = np.linspace(0, 1, 1001)
    with ad.precision(np.float64):
        h = blender_entropy(ad.Value(betas)).data
    assert betas[np.argmax(h)] == pytest.approx(0.5)
    assert h.min() >= 0


def test_checkpoint_round_trip(tmp_path):
    agent = make_agent()
    agent.policy_weights.data[...] = [1.0, 2.0, 3.0]
    path = tmp_path / "a.grailck"
    save_checkpoint(agent, path)
    assert path.read_bytes()[:8] == b"GRAILCK1"
    manifest, arrays = read_checkpoint(path)
    assert manifest["actions"] == ["up", "right", "left"]
    other = make_agent(seed=9)
    load_checkpoint(other, path)
    for (n1, p1), (n2, p2) in zip(agent.named_arrays(), other.named_arrays()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_partial_groups(tmp_path):
    src, dst = make_agent(seed=1), make_agent(seed=2)
    src.policy_weights.data[...] = 5.0
    path = tmp_path / "a.grailck"
    save_checkpoint(src, path)
    before = dst.actor.parameters[0].data.copy()
    load_checkpoint(dst, path, groups=("psi/", "phi"))
    assert np.all(dst.policy_weights.data == 5.0)
    np.testing.assert_array_equal(dst.actor.parameters[0].data, before)


def test_checkpoint_rejects_mismatch_and_damage(tmp_path):
    path = tmp_path / "a.grailck"
    save_checkpoint(make_agent(), path)
    fewer = HybridAgent(DECLS, parse_program("up(X) :- near(P,L).", DECLS), None, SPEC, STATUS,
                        blend_mode="neural")
    with pytest.raises(CheckpointError, match="policy_clauses"):
        load_checkpoint(fewer, path)
    raw = path.read_bytes()
    (tmp_path / "short.grailck").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short.grailck")
    (tmp_path / "bad.grailck").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad.grailck")


def test_action_mismatch_with_environment():
    spec = SimpleNamespace(actions=["up", "left", "right"], slots={"agent": 1})
    with pytest.raises(ConfigError):
        HybridAgent(DECLS, parse_program(POLICY, DECLS), None, spec, STATUS, blend_mode="neural")

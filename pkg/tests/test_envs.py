import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grail.envs import env_class, fixture_path, load_env_spec, make_env, status_atoms
from grail.envs.base import Object, Scene, read_replay, write_replay
from grail.errors import EnvError

from conftest import ENVS


def run(env, actions, seed):
    scenes = [env.reset(seed).to_dict()]
    for a in actions:
        if env.done:
            break
        scene, r, done, info = env.step(a)
        scenes.append((scene.to_dict(), r, done, info["goals"]))
    return scenes


def test_ladderworld_reset_layout():
    scene = make_env("ladderworld").reset(0)
    got = [(o.type, o.x, o.y) for o in scene.objects]
    assert got == [("agent", 20.0, 190.0), ("ladder", 132.0, 190.0), ("ladder", 28.0, 130.0),
                   ("ladder", 132.0, 70.0), ("child", 132.0, 10.0)]


@pytest.mark.parametrize("env_name", ENVS)
@pytest.mark.parametrize("variant", ["simplified", "full"])
def test_determinism_and_replay(env_name, variant, tmp_path):
    env = make_env(env_name, variant, action_repeat=2, episode_cap=400)
    actions = np.random.default_rng(1).integers(0, env.n_actions, 200)
    a = run(env, actions, seed=5)
    b = run(make_env(env_name, variant, action_repeat=2, episode_cap=400), actions, seed=5)
    assert a == b
    path = tmp_path / "replay.json"
    write_replay(path, env_name, variant, 5, actions)
    rep = read_replay(path)
    assert run(env, rep["actions"], rep["seed"]) == a


@pytest.mark.parametrize("env_name", ENVS)
@pytest.mark.parametrize("variant", ["simplified", "full"])
def test_scenes_stay_valid(env_name, variant):
    env = make_env(env_name, variant, episode_cap=600)
    rng = np.random.default_rng(2)
    scene = env.reset(3)
    types = set(env.spec.slots)
    while not env.done:
        scene.validate(env.spec.max_objects)
        assert {o.type for o in scene.objects} <= types
        for kind, n in env.spec.slots.items():
            assert len(scene.of_type(kind)) <= n
        a = env.scripted_action() if rng.random() < 0.5 else int(rng.integers(env.n_actions))
        scene, *_ = env.step(a)


@pytest.mark.parametrize("env_name", ENVS)
def test_simplified_is_full_without_hazards(env_name):
    simple = make_env(env_name, "simplified")
    full = make_env(env_name, "full")
    assert not simple.spec.hazards and full.spec.hazards
    rng = np.random.default_rng(0)
    seen_simple, seen_full = set(), set()
    for env, seen in ((simple, seen_simple), (full, seen_full)):
        scene = env.reset(1)
        for _ in range(1500):
            seen |= {o.type for o in scene.objects}
            if env.done:
                break
            scene, *_ = env.step(int(rng.integers(env.n_actions)))
    assert seen_simple <= seen_full
    assert seen_full - seen_simple  # the full variant shows hazards


@pytest.mark.parametrize("env_name", ENVS)
def test_scripted_policy_reaches_goals(env_name):
    env = make_env(env_name, "simplified", action_repeat=4)
    env.reset(0)
    goals = 0
    while not env.done:
        _, r, _, info = env.step(env.scripted_action())
        goals += info["goals"]
        assert info["goal_achieved"] == (info["goals"] > 0)
    assert goals > 0 and goals == env.goals


@pytest.mark.parametrize("repeat,expected", [(4, 17), (1, 18)])
def test_ladderworld_scripted_goal_count(repeat, expected):
    # one cycle at repeat 4: walk 14 + climb 1 + walk 13 + climb 1 + walk 13 + climb 1
    # = 43 decisions, 750 decisions per episode; at repeat 1 a cycle is 163 frames of 3000
    env = make_env("ladderworld", "simplified", action_repeat=repeat)
    env.reset(0)
    decisions, total = 0, 0.0
    while not env.done:
        _, r, _, _ = env.step(env.scripted_action())
        decisions += 1
        total += r
    assert env.goals == expected
    assert total == expected  # simplified rewards only the goal
    assert env.frame == 3000 and decisions == 3000 // repeat


def test_ladderworld_hand_trace():
    env = make_env("ladderworld", "simplified", action_repeat=1)
    env.reset(0)
    act = env.actions.index
    _, r, _, info = env.step(act("up_ladder"))  # far from the ladder: nothing happens
    assert (env.x, env.y, r) == (20.0, 190.0, 0.0)
    for _ in range(3):
        env.step(act("right_ladder"))
    assert env.x == 26.0
    env.step(act("left_ladder"))
    assert env.x == 24.0
    env.x = 127.0  # within align_tol of the first ladder
    _, _, _, info = env.step(act("up_ladder"))
    assert env.climbing and env.x == 132.0 and env.y == 175.0
    for _ in range(3):
        _, _, _, info = env.step(act("left_ladder"))  # ignored while climbing
    assert env.level == 1 and env.y == 130.0 and info["events"] == ["climb"]
    assert env.x == 132.0


def test_status_examples():
    fns = env_class("ladderworld").status_fns()
    calm = Scene([Object("agent", 50, 190), Object("monkey", 150, 30)])
    busy = Scene([Object("agent", 50, 190), Object("coconut", 60, 180)])
    assert fns["nothing_around"](calm) == {("world",): 1.0}
    assert fns["nothing_around"](busy) == {("world",): 0.0}
    slalom = env_class("slalomworld").status_fns()
    skier = Scene([Object("flag", 10, 10), Object("agent", 80, 40, orientation="left")])
    assert slalom["left_oriented"](skier) == {("obj1",): 1.0}
    assert slalom["right_oriented"](skier) == {("obj1",): 0.0}
    table = status_atoms(env_class("slalomworld"), skier)
    assert table[("true", ("world",))] == 1.0


def test_env_errors():
    env = make_env("ladderworld", episode_cap=1)
    with pytest.raises(EnvError):
        env.step(0)  # not reset
    env.reset(0)
    with pytest.raises(EnvError):
        env.step(3)
    env.step(0)
    assert env.done
    with pytest.raises(EnvError):
        env.step(0)
    with pytest.raises(EnvError):
        load_env_spec(fixture_path("ladderworld"), variant="hard")
    with pytest.raises(EnvError):
        env_class("pong")
    with pytest.raises(EnvError):
        Scene([Object("ladder", 1, 1)]).validate()


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ENVS), st.integers(0, 10 ** 6), st.integers(1, 4))
def test_episode_cap_counts_frames(env_name, seed, repeat):
    env = make_env(env_name, "simplified", action_repeat=repeat, episode_cap=37)
    env.reset(seed)
    n = 0
    rng = np.random.default_rng(seed)
    while not env.done:
        env.step(int(rng.integers(env.n_actions)))
        n += 1
    assert env.frame == 37 and n == -(-37 // repeat)

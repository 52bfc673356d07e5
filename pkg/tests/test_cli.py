import json
import re
from pathlib import Path

import numpy as np
import pytest

from grail.agent import save_checkpoint
from grail.cli import main
from grail.concepts import align_to_proxies, read_heatmap_csv
from grail.config import build_setup, load_run_config, parse_run_config
from grail.envs import data_dir
from grail.ppo import build_agent

from conftest import ENVS

SMOKE = str(data_dir() / "configs" / "ladderworld_smoke.toml")
LADDER = str(data_dir() / "configs" / "ladderworld.toml")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["exit_code"] == code
    return code, summary, out


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", SMOKE, "--stage", "1", "--seed", "7", "--out",
                 str(out), "--quiet"]) == 0
    return out


def test_usage_errors(capsys):
    code, s, _ = run(capsys)
    assert code == 2 and s["status"] == "error"
    code, s, _ = run(capsys, "train", "--config", SMOKE)
    assert code == 2  # --out missing
    code, s, _ = run(capsys, "train", "--config", SMOKE, "--stage", "2", "--out", "/tmp/x")
    assert code == 2 and "from-checkpoint" in s["error"]


def test_config_error_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(Path(SMOKE).read_text().replace("epochs = 2", "epochs = 2\nepoch = 3"))
    code, s, _ = run(capsys, "train", "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and "epoch" in s["key"]


def test_train_smoke_and_determinism(stage1_run, tmp_path, capsys):
    files = sorted(p.name for p in stage1_run.iterdir())
    assert "metrics.ndjson" in files and "config.snapshot" in files
    assert any(f.startswith("ckpt_") for f in files)
    code, s, _ = run(capsys, "train", "--config", SMOKE, "--seed", "7", "--out", tmp_path,
                     "--quiet")
    assert code == 0 and s["seed"] == 7
    assert (tmp_path / "metrics.ndjson").read_bytes() == \
        (stage1_run / "metrics.ndjson").read_bytes()


def test_snapshot_rerun_reproduces(stage1_run, tmp_path, capsys):
    snap = stage1_run / "config.snapshot"
    assert snap.read_text().startswith("# grail train --stage 1 --seed 7")
    code, _, _ = run(capsys, "train", "--config", snap, "--out", tmp_path, "--quiet")
    assert code == 0
    assert (tmp_path / "metrics.ndjson").read_bytes() == \
        (stage1_run / "metrics.ndjson").read_bytes()


def test_stage2_from_checkpoint(stage1_run, tmp_path, capsys):
    ckpt = next(stage1_run.glob("ckpt_*.grailck"))
    cfg = Path(SMOKE).read_text().replace("total_steps = 2048", "total_steps = 256")
    (tmp_path / "s2.toml").write_text(cfg)
    code, s, _ = run(capsys, "train", "--config", tmp_path / "s2.toml", "--stage", "2",
                     "--from-checkpoint", ckpt, "--out", tmp_path / "o", "--quiet")
    assert code == 0 and s["stage"] == 2


def test_eval_errors_and_reproducibility(stage1_run, capsys):
    ckpt = next(stage1_run.glob("ckpt_*.grailck"))
    code, _, _ = run(capsys, "eval", "--checkpoint", ckpt, "--config", SMOKE, "--episodes", 0)
    assert code == 2
    args = ("eval", "--checkpoint", ckpt, "--config", SMOKE, "--episodes", 2, "--seed", 3)
    code, s1, out = run(capsys, *args)
    assert code == 0 and "goals per episode" in out
    _, s2, _ = run(capsys, *args)
    assert s1 == s2


def test_eval_incompatible_checkpoint(stage1_run, tmp_path, capsys):
    ckpt = next(stage1_run.glob("ckpt_*.grailck"))
    cfg = tmp_path / "slalom.toml"
    cfg.write_text(Path(SMOKE).read_text().replace("ladderworld", "slalomworld"))
    code, _, _ = run(capsys, "eval", "--checkpoint", ckpt, "--config", cfg, "--episodes", 1)
    assert code == 3


def test_eval_scripted_equivalent_checkpoint(tmp_path, capsys):
    # valuations fitted to the proxies make the greedy logic policy act like
    # the scripted walker-climber, which scores 17 goals per episode
    setup = build_setup(load_run_config(LADDER))
    agent = build_agent(setup, 1, 0)
    ladder_preds = ["on_ladder", "same_level_ladder", "left_of_ladder", "right_of_ladder"]
    align_to_proxies(agent.nets, setup.proxies, ladder_preds)
    agent.stage = 1
    save_checkpoint(agent, tmp_path / "scripted.grailck")
    code, s, _ = run(capsys, "eval", "--checkpoint", tmp_path / "scripted.grailck", "--config",
                     LADDER, "--episodes", 3, "--mode", "greedy")
    assert code == 0
    assert s["goals_per_episode"] == 17.0


def test_heatmap_proxy_row_constant(tmp_path, capsys):
    proxy = tmp_path / "left.proxy"
    proxy.write_text("sigmoid(-12*dx)\n")
    code, s, _ = run(capsys, "heatmap", "--proxy", proxy, "--resolution", 3, "--out",
                     tmp_path / "h.csv")
    assert code == 0 and s["shape"] == [3, 3]
    hm = read_heatmap_csv((tmp_path / "h.csv").read_text())
    for row in hm.values:
        np.testing.assert_allclose(row, [0.9975273768433653, 0.5, 0.0024726231566347743],
                                   atol=1e-9)


def test_heatmap_fresh_checkpoint_is_half(tmp_path, capsys):
    setup = build_setup(load_run_config(SMOKE))
    save_checkpoint(build_agent(setup, 1, 0), tmp_path / "fresh.grailck")
    code, s, _ = run(capsys, "heatmap", "--checkpoint", tmp_path / "fresh.grailck",
                     "--predicate", "on_ladder", "--resolution", 5, "--out", tmp_path / "h.ppm")
    assert code == 0 and s["min"] == s["max"] == 0.5
    assert (tmp_path / "h.ppm").read_bytes().startswith(b"P5\n5 5\n255\n")


def test_heatmap_errors(stage1_run, tmp_path, capsys):
    ckpt = next(stage1_run.glob("ckpt_*.grailck"))
    code, s, _ = run(capsys, "heatmap", "--checkpoint", ckpt, "--predicate", "nope",
                     "--out", tmp_path / "h.csv")
    assert code == 2 and "on_ladder" in s["error"]
    code, _, _ = run(capsys, "heatmap", "--checkpoint", ckpt, "--predicate", "on_ladder",
                     "--mode", "scene", "--out", tmp_path / "h.csv")
    assert code == 2
    code, _, _ = run(capsys, "heatmap", "--checkpoint", ckpt, "--predicate", "on_ladder",
                     "--out", tmp_path / "h.png")
    assert code == 2


def test_heatmap_scene_mode(stage1_run, tmp_path, capsys):
    ckpt = next(stage1_run.glob("ckpt_*.grailck"))
    code, s, _ = run(capsys, "heatmap", "--checkpoint", ckpt, "--predicate", "on_ladder",
                     "--mode", "scene", "--scene-fixture", data_dir() / "scenes" /
                     "ladderworld.json", "--anchor", 1, "--resolution", 6, "--out",
                     tmp_path / "s.csv")
    assert code == 0 and s["shape"] == [6, 6]


@pytest.mark.parametrize("env", ENVS)
def test_check_fixture_programs(env, capsys):
    d = data_dir()
    code, s, out = run(capsys, "check", "--decls", d / "decls" / f"{env}.toml",
                       "--program", d / "programs" / env / "policy.pl",
                       "--program", d / "programs" / env / "blend.pl",
                       "--proxy", d / "proxies" / env / "wide",
                       "--proxy", d / "proxies" / env / "tall")
    assert code == 0 and s["failed"] == 0


def test_check_reports_bad_program(tmp_path, capsys):
    d = data_dir()
    prog = tmp_path / "bad.pl"
    prog.write_text("up_ladder(X) :- on_ladder(P,L).\nup_ladder(X) :- floating(P).\n")
    code, s, out = run(capsys, "check", "--decls", d / "decls" / "ladderworld.toml",
                       "--program", prog)
    assert code == 1 and s["failed"] == 1
    assert "floating" in out and "up_ladder(X) :- floating(P)" in out


def test_check_needs_a_target(capsys):
    code, _, _ = run(capsys, "check")
    assert code == 2


def test_check_gradcheck_small(capsys):
    code, s, _ = run(capsys, "check", "--gradcheck", "--instances", 2)
    assert code == 0 and s["max_rel_error"] <= 1e-4


def test_thread_count_does_not_change_results(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(Path(SMOKE).read_text().replace("total_steps = 2048", "total_steps = 512"))
    run(capsys, "train", "--config", cfg, "--out", tmp_path / "one", "--quiet")
    monkeypatch.setenv("GRAIL_THREADS", "3")
    run(capsys, "train", "--config", cfg, "--out", tmp_path / "three", "--quiet")
    assert (tmp_path / "one" / "metrics.ndjson").read_bytes() == \
        (tmp_path / "three" / "metrics.ndjson").read_bytes()


def test_doc_config_examples_parse():
    text = (Path(__file__).parent.parent / "docs" / "config.md").read_text()
    blocks = re.findall(r"```toml\n(.*?)```", text, flags=re.S)
    assert len(blocks) >= 3
    full = [b for b in blocks if "[train]" in b and "[env]" in b]
    assert full
    for block in full:
        parse_run_config(block, base_dir=data_dir() / "configs").train.validate()

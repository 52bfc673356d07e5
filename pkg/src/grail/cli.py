"""Command-line entry point: ``grail {train,eval,heatmap,check}``.

Exit codes: 0 success, 1 check or training failure, 2 usage or config error,
3 incompatible artifact. The last stdout line of every command is a JSON
summary.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CheckpointError, ConfigError, GrailError, PositionedSyntaxError,
                     TrainingError)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ARTIFACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _summary(command, code, **fields):
    status = "ok" if code == EXIT_OK else ("failed" if code == EXIT_FAIL else "error")
    record = {"command": command, "status": status, "exit_code": code, **fields}
    print(json.dumps(record, sort_keys=True, default=str))
    return code


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- train


def cmd_train(args):
    from .config import build_setup, dump_run_config, load_run_config
    from .ppo import train

    if args.stage == 2 and not args.from_checkpoint:
        raise UsageError("stage 2 needs --from-checkpoint (a stage-1 checkpoint)")
    cfg = load_run_config(args.config)
    if args.stage is not None:
        cfg.train.stage = args.stage
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.train.validate()
    setup = build_setup(cfg)
    init = None
    if args.from_checkpoint:
        init = Path(args.from_checkpoint)
        if not init.is_file():
            raise UsageError(f"checkpoint {init} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = f"grail train --stage {cfg.train.stage} --seed {cfg.train.seed}"
    if init is not None:
        header += f" --from-checkpoint {init.resolve()}"
    (out / "config.snapshot").write_text(dump_run_config(cfg, header))

    def log(r):
        ret = "-" if r["mean_return"] is None else f"{r['mean_return']:.2f}"
        lca = "-" if r["l_ca"] is None else f"{r['l_ca']:.4f}"
        print(f"iter {r['iteration']:4d}  step {r['step']:8d}  episodes {r['episodes']:3d}  "
              f"return {ret:>7}  l_ca {lca}  entropy {r['entropy']:.3f}", flush=True)

    _, final = train(cfg.train, setup, out, init_checkpoint=init, log=None if args.quiet else log)
    last = {}
    lines = (out / "metrics.ndjson").read_text().splitlines()
    if lines:
        last = json.loads(lines[-1])
    return _summary("train", EXIT_OK, stage=cfg.train.stage, seed=cfg.train.seed,
                    steps=cfg.train.total_steps, checkpoint=str(final),
                    metrics=str(out / "metrics.ndjson"), last=last)


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    from .agent import load_checkpoint, read_checkpoint
    from .config import build_setup, load_run_config
    from .ppo import build_agent, configure_stage, evaluate

    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    cfg = load_run_config(args.config)
    manifest, _ = read_checkpoint(ckpt)
    stage = args.stage or manifest.get("stage") or cfg.train.stage
    cfg.train.stage = stage
    setup = build_setup(cfg)
    agent = build_agent(setup, stage, cfg.train.seed)
    if manifest.get("blend_mode", agent.blend_mode) != agent.blend_mode:
        raise CheckpointError(f"{ckpt}: blend_mode {manifest.get('blend_mode')} != "
                              f"{agent.blend_mode}")
    load_checkpoint(agent, ckpt)
    configure_stage(agent, stage)
    res = evaluate(agent, lambda: setup.make_env(stage), args.episodes, mode=args.mode,
                   seed=args.seed)
    print(f"mean return {res.mean_return:.3f} +- {res.std_return:.3f} over {args.episodes} "
          f"episodes ({args.mode}, stage {stage} environment)")
    print(f"goals per episode {res.goals_per_episode:.3f}, completion rate "
          f"{res.completion_rate:.3f}")
    return _summary("eval", EXIT_OK, stage=stage, mode=args.mode, seed=args.seed,
                    **res.as_dict())


# ---------------------------------------------------------------- heatmap


def _checkpoint_nets(path):
    from .agent import read_checkpoint
    from .concepts import ValuationNet

    manifest, arrays = read_checkpoint(path)
    nets = {}
    for pred in manifest.get("predicates", []):
        net = ValuationNet(pred)
        try:
            net.mlp.load_arrays([arrays[f"psi/{pred}/{i}"].astype(np.float32)
                                 for i in range(len(net.parameters))])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: valuation net {pred} is incompatible ({exc})") \
                from None
        nets[pred] = net
    return nets


def cmd_heatmap(args):
    from .concepts import export_heatmap, load_proxy, load_proxy_dir
    from .envs import load_scene

    if args.resolution < 1:
        raise UsageError("--resolution must be positive")
    out = Path(args.out)
    if out.suffix not in (".csv", ".ppm"):
        raise UsageError("--out must end in .csv or .ppm")
    if args.mode == "scene" and (args.scene_fixture is None or args.anchor is None):
        raise UsageError("scene mode needs --scene-fixture and --anchor")
    if args.checkpoint:
        src = Path(args.checkpoint)
        if not src.is_file():
            raise UsageError(f"checkpoint {src} does not exist")
        targets = _checkpoint_nets(src)
    else:
        src = Path(args.proxy)
        if src.is_dir():
            targets = load_proxy_dir(src)
        elif src.is_file():
            targets = {src.stem: load_proxy(src)}
        else:
            raise UsageError(f"proxy {src} does not exist")
    name = args.predicate
    if name is None:
        if len(targets) != 1:
            raise UsageError(f"--predicate is required; available: {', '.join(sorted(targets))}")
        name = next(iter(targets))
    if name not in targets:
        raise UsageError(f"unknown predicate {name!r}; available: {', '.join(sorted(targets))}")
    scene = None
    if args.mode == "scene":
        fixture = Path(args.scene_fixture)
        if not fixture.is_file():
            raise UsageError(f"scene fixture {fixture} does not exist")
        scene = load_scene(fixture)
        if not 0 <= args.anchor < len(scene.objects):
            raise UsageError(f"--anchor {args.anchor} out of range for "
                             f"{len(scene.objects)} objects")
    hm = export_heatmap(targets[name], mode=args.mode, resolution=args.resolution, scene=scene,
                        anchor=args.anchor)
    out.parent.mkdir(parents=True, exist_ok=True)
    hm.save(out)
    v = hm.values
    print(f"{name}: {v.shape[0]}x{v.shape[1]} {args.mode} heatmap written to {out}")
    return _summary("heatmap", EXIT_OK, predicate=name, mode=args.mode, out=str(out),
                    shape=list(v.shape), min=float(v.min()), max=float(v.max()),
                    mean=float(v.mean()))


# ---------------------------------------------------------------- check


def _check_programs(paths, decls_path, report):
    from .logiclang import load_decls, load_program

    decls = load_decls(decls_path)
    ok = True
    for path in paths:
        try:
            prog = load_program(path, decls)
            report(True, f"program {path}: {len(prog)} clause(s)")
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        except (GrailError, PositionedSyntaxError) as exc:
            ok = False
            report(False, f"program {path}: {exc}")
    return ok


def _check_proxies(paths, report):
    from .concepts import build_grid, load_proxy

    grid = build_grid(49)
    ok = True
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files = sorted(path.glob("*.proxy"))
            if not files:
                ok = False
                report(False, f"proxy dir {path}: no .proxy files")
        elif path.is_file():
            files = [path]
        else:
            raise UsageError(f"proxy {path} does not exist")
        for f in files:
            try:
                px = load_proxy(f)
                vals = px(grid.dx, grid.dy)
                report(True, f"proxy {f}: range [{vals.min():.3f}, {vals.max():.3f}] on the "
                             f"49x49 grid")
            except (GrailError, PositionedSyntaxError, UnicodeDecodeError) as exc:
                ok = False
                report(False, f"proxy {f}: {exc}")
    return ok


def _check_gradients(instances, report):
    from .gradcheck import CASES, run_suite

    results, seconds = run_suite(instances=instances)
    ok = True
    for case in CASES:
        rs = [r for r in results if r.case == case]
        worst = max(r.max_rel_error for r in rs)
        fails = sum(len(r.failures) for r in rs)
        good = fails == 0
        ok &= good
        near = max(r.max_abs_error_near_zero for r in rs)
        report(good, f"gradcheck {case}: {len(rs)} instance(s), "
                     f"{sum(r.checked for r in rs)} entries, max relative error {worst:.2e}, "
                     f"max absolute error near zero {near:.1e}")
    return ok, max(r.max_rel_error for r in results), seconds


def cmd_check(args):
    if not (args.program or args.proxy or args.gradcheck):
        raise UsageError("nothing to check: give --program/--decls, --proxy or --gradcheck")
    if args.program and not args.decls:
        raise UsageError("--program needs --decls")
    items = []

    def report(ok, line):
        items.append(ok)
        print(("ok    " if ok else "FAIL  ") + line, flush=True)

    ok = True
    extra = {}
    if args.program:
        ok &= _check_programs(args.program, args.decls, report)
    if args.proxy:
        ok &= _check_proxies(args.proxy, report)
    if args.gradcheck:
        g_ok, worst, seconds = _check_gradients(args.instances, report)
        ok &= g_ok
        extra = {"max_rel_error": worst, "gradcheck_seconds": round(seconds, 3)}
    code = EXIT_OK if ok else EXIT_FAIL
    return _summary("check", code, checked=len(items), failed=items.count(False), **extra)


# ---------------------------------------------------------------- wiring


def build_parser():
    p = _Parser(prog="grail", description="Logic policies over learned spatial concepts.")
    p.add_argument("--version", action="version", version=f"grail {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--seed", type=int)
    t.add_argument("--from-checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true", help="no per-iteration progress lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--mode", choices=("sampled", "greedy"), default="sampled")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--stage", type=int, choices=(1, 2),
                   help="environment stage (default: the stage recorded in the checkpoint)")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="export a valuation or proxy heatmap")
    src = h.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--proxy", help=".proxy file or a directory of them")
    h.add_argument("--predicate")
    h.add_argument("--mode", choices=("offset", "scene"), default="offset")
    h.add_argument("--scene-fixture")
    h.add_argument("--anchor", type=int)
    h.add_argument("--resolution", type=int, default=49)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("check", help="validate programs and proxies, or run gradient checks")
    c.add_argument("--program", action="append", help="repeatable")
    c.add_argument("--decls")
    c.add_argument("--proxy", action="append", help="file or directory; repeatable")
    c.add_argument("--gradcheck", action="store_true")
    c.add_argument("--instances", type=int, default=20, help="gradcheck instances per case")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    command = "grail"
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: train, eval, heatmap or check")
        command = args.command
        return args.func(args)
    except UsageError as exc:
        _err(exc)
        return _summary(command, EXIT_USAGE, error=str(exc))
    except ConfigError as exc:
        _err(exc)
        return _summary(command, EXIT_USAGE, error=str(exc), key=exc.key)
    except CheckpointError as exc:
        _err(exc)
        return _summary(command, EXIT_ARTIFACT, error=str(exc))
    except (TrainingError, GrailError) as exc:
        _err(exc)
        return _summary(command, EXIT_FAIL, error=str(exc))


if __name__ == "__main__":
    sys.exit(main())

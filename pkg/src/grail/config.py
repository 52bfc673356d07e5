"""Run configuration files (TOML) and their resolution into training inputs.

Paths inside a config are resolved against the config file's directory; a
``builtin:`` prefix points into the bundled ``grail/data`` directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from ._toml import TOMLDecodeError, loads_toml
from .concepts import load_proxies
from .envs import data_dir, env_class, fixture_path, load_env_spec
from .errors import ConfigError, GrailError
from .logiclang import load_decls, load_program

SECTIONS = ("env", "programs", "proxies", "train", "agent")
STAGE_DEFAULTS = {1: {"variant": "simplified", "action_repeat": 4},
                  2: {"variant": "full", "action_repeat": 1}}


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    c_vf: float = 0.5
    c_ae: float = 0.01
    c_be: float = 0.01
    c_ca: float = 0.3
    gamma_ca: float = 1.0
    grid_k: int = 49
    rollout_len: int = 128
    n_envs: int = 8
    epochs: int = 10
    minibatches: int = 4
    lr: float = 2.5e-4
    grad_clip: float = 0.5
    total_steps: int = 200_000
    stage: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # iterations between periodic checkpoints, 0 = final only

    def validate(self):
        for name in ("gamma", "gae_lambda", "c_vf", "c_ae", "c_be", "c_ca", "gamma_ca", "lr",
                     "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative", f"train.{name}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)", "train.clip_eps")
        if self.gamma_ca > 1:
            raise ConfigError("gamma_ca must lie in [0, 1]", "train.gamma_ca")
        for name in ("grid_k", "rollout_len", "n_envs", "epochs", "minibatches", "total_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer", f"train.{name}")
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2", "train.stage")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative", "train.checkpoint_every")
        if self.minibatches > self.rollout_len * self.n_envs:
            raise ConfigError("more minibatches than transitions per rollout", "train.minibatches")
        return self

    @property
    def batch_size(self):
        return self.rollout_len * self.n_envs

    @property
    def iterations(self):
        return -(-self.total_steps // self.batch_size)


@dataclass
class EnvConfig:
    name: str = "ladderworld"
    variant_stage1: str = "simplified"
    variant_stage2: str = "full"
    action_repeat_stage1: int = 4
    action_repeat_stage2: int = 1
    episode_cap_stage1: int = 0  # 0 = fixture default
    episode_cap_stage2: int = 0


@dataclass
class ProgramsConfig:
    decls: str = ""
    policy: str = ""
    blend: str = ""


@dataclass
class ProxiesConfig:
    dir: str = ""
    aligned: list = field(default_factory=list)  # empty = every spatial predicate


TRAINABLE_GROUPS = ("psi", "theta", "phi", "lambda", "critics")
STAGE_GROUPS = {1: ("psi", "critics"), 2: ("theta", "phi", "lambda", "critics")}


@dataclass
class AgentConfig:
    blend_mode: str = "logic"
    trainable: list = field(default_factory=list)  # empty = the stage's default groups


@dataclass
class RunConfig:
    env: EnvConfig
    programs: ProgramsConfig
    proxies: ProxiesConfig
    train: TrainConfig
    agent: AgentConfig
    text: str = ""
    base_dir: Path = Path(".")


def _section(cls, data, name):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}", f"{name}.{key}")
        default = known[key].default
        if default is not dataclasses.MISSING and default is not None:
            ok = isinstance(val, type(default)) or (isinstance(default, float)
                                                     and isinstance(val, int))
            if isinstance(default, int) and not isinstance(default, bool) \
                    and isinstance(val, bool):
                ok = False
            if not ok:
                raise ConfigError(f"{name}.{key} should be {type(default).__name__}, "
                                  f"got {type(val).__name__}", f"{name}.{key}")
            if isinstance(default, float):
                val = float(val)
        kwargs[key] = val
    return cls(**kwargs)


def parse_run_config(text, base_dir=".") -> RunConfig:
    try:
        data = loads_toml(text)
    except TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}", "") from None
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section [{key}]", key)
        if not isinstance(data[key], dict):
            raise ConfigError(f"{key} must be a table", key)
    cfg = RunConfig(
        env=_section(EnvConfig, data.get("env", {}), "env"),
        programs=_section(ProgramsConfig, data.get("programs", {}), "programs"),
        proxies=_section(ProxiesConfig, data.get("proxies", {}), "proxies"),
        train=_section(TrainConfig, data.get("train", {}), "train"),
        agent=_section(AgentConfig, data.get("agent", {}), "agent"),
        text=text,
        base_dir=Path(base_dir),
    )
    cfg.train.validate()
    for key in ("variant_stage1", "variant_stage2"):
        if getattr(cfg.env, key) not in ("simplified", "full"):
            raise ConfigError(f"env.{key} must be 'simplified' or 'full'", f"env.{key}")
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "") from None
    return parse_run_config(text, path.parent)


def _absolute(ref, base_dir):
    if not ref or ref.startswith("builtin:") or Path(ref).is_absolute():
        return ref
    if not ref.endswith(".toml") and "/" not in ref and "\\" not in ref and ref[:1] != ".":
        return ref  # a bundled environment name such as "ladderworld"
    return str((Path(base_dir) / ref).resolve())


def dump_run_config(cfg: RunConfig, header="") -> str:
    """Effective config as TOML, with file references made absolute.

    Loading the result from any directory yields the same run.
    """
    data = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    data["env"]["name"] = _absolute(cfg.env.name, cfg.base_dir)
    for key in ("decls", "policy", "blend"):
        data["programs"][key] = _absolute(data["programs"][key], cfg.base_dir)
    data["proxies"]["dir"] = _absolute(cfg.proxies.dir, cfg.base_dir)
    text = tomli_w.dumps(data)
    if header:
        text = "".join(f"# {line}\n" for line in header.splitlines()) + "\n" + text
    return text


def resolve_path(ref, base_dir, key):
    if not ref:
        raise ConfigError(f"{key} is required", key)
    if ref.startswith("builtin:"):
        path = data_dir() / ref[len("builtin:"):]
    else:
        path = Path(ref)
        if not path.is_absolute():
            path = Path(base_dir) / path
    if not path.exists():
        raise ConfigError(f"{key}: {path} does not exist", key)
    return path


@dataclass
class Setup:
    """Everything resolved from a RunConfig that training and evaluation need."""

    config: RunConfig
    env_fixture: Path
    env_name: str
    decls: object
    policy: object
    blend: object
    proxies: dict
    aligned: list

    @property
    def status_fns(self):
        return env_class(self.env_name).status_fns()

    def env_spec(self, stage):
        e = self.config.env
        variant = getattr(e, f"variant_stage{stage}")
        cap = getattr(e, f"episode_cap_stage{stage}") or None
        return load_env_spec(self.env_fixture, variant, episode_cap=cap,
                             action_repeat=getattr(e, f"action_repeat_stage{stage}"))

    def make_env(self, stage):
        spec = self.env_spec(stage)
        return env_class(spec.name)(spec)


def check_trainable(groups, stage):
    """Reject parameter groups a stage must keep frozen.

    Stage 1 trains only the valuation nets and critics (beta is forced to 0);
    stage 2 keeps the valuation nets frozen.
    """
    unknown = [g for g in groups if g not in TRAINABLE_GROUPS]
    if unknown:
        raise ConfigError(f"unknown parameter groups {unknown}; known: "
                          f"{', '.join(TRAINABLE_GROUPS)}", "agent.trainable")
    bad = [g for g in groups if g not in STAGE_GROUPS[stage]]
    if bad:
        raise ConfigError(f"stage {stage} cannot train {bad}; allowed: "
                          f"{', '.join(STAGE_GROUPS[stage])}", "agent.trainable")
    return list(groups) or list(STAGE_GROUPS[stage])


def build_setup(cfg: RunConfig) -> Setup:
    """Load the fixture, declarations, programs and proxies named by ``cfg``."""
    env_ref = cfg.env.name
    if env_ref.endswith(".toml") or env_ref.startswith("builtin:"):
        fixture = resolve_path(env_ref, cfg.base_dir, "env.name")
    else:
        fixture = fixture_path(env_ref)
        if not fixture.exists():
            raise ConfigError(f"unknown environment {env_ref!r}", "env.name")
    try:
        spec = load_env_spec(fixture)
        env_class(spec.name)
        decls = load_decls(resolve_path(cfg.programs.decls, cfg.base_dir, "programs.decls"))
        policy = load_program(resolve_path(cfg.programs.policy, cfg.base_dir, "programs.policy"),
                              decls, role="policy")
        blend = None
        if cfg.programs.blend:
            blend = load_program(resolve_path(cfg.programs.blend, cfg.base_dir, "programs.blend"),
                                 decls, role="blend")
    except ConfigError:
        raise
    except (GrailError, SyntaxError, OSError) as exc:
        raise ConfigError(str(exc), "programs") from None
    if list(decls.actions) != list(spec.actions):
        raise ConfigError(f"declared actions {decls.actions} differ from the environment's "
                          f"{spec.actions}", "programs.decls")
    proxies, aligned = {}, []
    if cfg.proxies.dir:
        proxies = load_proxies(resolve_path(cfg.proxies.dir, cfg.base_dir, "proxies.dir"))
        aligned = list(cfg.proxies.aligned) or [p for p in decls.spatial if p in proxies]
        missing = [p for p in aligned if p not in proxies or p not in decls.spatial]
        if missing:
            raise ConfigError(f"no proxy or spatial declaration for {missing}", "proxies.aligned")
    if cfg.train.c_ca > 0 and cfg.train.stage == 1 and not aligned:
        raise ConfigError("c_ca > 0 needs proxies for at least one spatial predicate",
                          "proxies.dir")
    if cfg.agent.blend_mode not in ("neural", "logic"):
        raise ConfigError("agent.blend_mode must be 'neural' or 'logic'", "agent.blend_mode")
    check_trainable(cfg.agent.trainable, cfg.train.stage)
    if cfg.agent.blend_mode == "logic" and blend is None:
        raise ConfigError("logic blending needs programs.blend", "programs.blend")
    return Setup(cfg, fixture, spec.name, decls, policy, blend, proxies, aligned)

"""Object-centric toy environments."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..errors import EnvError
from .base import Env, EnvSpec, Object, Scene, load_env_spec, load_scene, status_atoms
from .diverworld import DiverWorld
from .ladderworld import LadderWorld
from .slalomworld import SlalomWorld

ENVS = {"ladderworld": LadderWorld, "diverworld": DiverWorld, "slalomworld": SlalomWorld}

__all__ = ["ENVS", "Env", "EnvSpec", "Object", "Scene", "env_class", "fixture_path",
           "load_env_spec", "load_scene", "make_env", "status_atoms"]


def data_dir() -> Path:
    return Path(str(resources.files("grail") / "data"))


def fixture_path(name) -> Path:
    return data_dir() / "envs" / f"{name}.toml"


def env_class(name):
    try:
        return ENVS[name]
    except KeyError:
        raise EnvError(f"unknown environment {name!r}; known: {', '.join(ENVS)}") from None


def make_env(fixture, variant="simplified", action_repeat=1, episode_cap=None) -> Env:
    """Build an environment from a fixture path or a bundled environment name."""
    path = Path(fixture)
    if not path.suffix:
        path = fixture_path(fixture)
    spec = load_env_spec(path, variant, episode_cap=episode_cap, action_repeat=action_repeat)
    return env_class(spec.name)(spec)

"""Object-centric scenes and the shared environment machinery."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._toml import load_toml
from ..errors import EnvError

VARIANTS = ("simplified", "full")
ORIENTATIONS = ("left", "straight", "right")


@dataclass
class Object:
    type: str
    x: float
    y: float
    visible: bool = True
    orientation: str | None = None


@dataclass
class Scene:
    objects: list
    width: float = 160.0
    height: float = 210.0
    info: dict = field(default_factory=dict)

    def constants(self):
        return [f"obj{i}" for i in range(len(self.objects))]

    def of_type(self, kind):
        return [i for i, o in enumerate(self.objects) if o.type == kind]

    @property
    def agent(self):
        for o in self.objects:
            if o.type == "agent":
                return o
        return None

    def validate(self, max_objects=None):
        agents = self.of_type("agent")
        if len(agents) != 1:
            raise EnvError(f"scene must hold exactly one agent, found {len(agents)}")
        if max_objects is not None and len(self.objects) > max_objects:
            raise EnvError(f"scene holds {len(self.objects)} objects, limit is {max_objects}")
        for o in self.objects:
            if o.visible and not (0 <= o.x <= self.width and 0 <= o.y <= self.height):
                raise EnvError(f"visible {o.type} at ({o.x}, {o.y}) lies outside the frame")

    def permuted(self, order):
        return Scene([self.objects[i] for i in order], self.width, self.height, dict(self.info))

    def to_dict(self):
        return {"width": self.width, "height": self.height, "info": self.info,
                "objects": [{"type": o.type, "x": o.x, "y": o.y, "visible": o.visible,
                             "orientation": o.orientation} for o in self.objects]}

    @classmethod
    def from_dict(cls, data):
        objs = [Object(o["type"], float(o["x"]), float(o["y"]), bool(o.get("visible", True)),
                       o.get("orientation")) for o in data["objects"]]
        return cls(objs, float(data.get("width", 160)), float(data.get("height", 210)),
                   dict(data.get("info", {})))


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EnvSpec:
    name: str
    variant: str
    width: float
    height: float
    actions: list
    slots: dict  # object type -> number of feature slots
    params: dict
    episode_cap: int
    action_repeat: int = 1

    @property
    def max_objects(self):
        return sum(self.slots.values())

    @property
    def hazards(self):
        return self.variant == "full"


def load_env_spec(path, variant="simplified", episode_cap=None, action_repeat=None) -> EnvSpec:
    """Read an environment fixture (TOML) and resolve one variant."""
    if variant not in VARIANTS:
        raise EnvError(f"variant must be one of {VARIANTS}, got {variant!r}")
    data = load_toml(path)
    try:
        name = data["name"]
        spec = EnvSpec(
            name=name,
            variant=variant,
            width=float(data["width"]),
            height=float(data["height"]),
            actions=list(data["actions"]),
            slots=dict(data["slots"]),
            params=dict(data["layout"]),
            episode_cap=int(episode_cap if episode_cap is not None
                            else data["episode_cap"][variant]),
            action_repeat=int(action_repeat if action_repeat is not None else 1),
        )
    except KeyError as exc:
        raise EnvError(f"{path}: missing fixture key {exc}") from None
    if spec.episode_cap <= 0 or spec.action_repeat <= 0:
        raise EnvError("episode_cap and action_repeat must be positive")
    return spec


class Env:
    """Base class: deterministic given (seed, action sequence).

    Subclasses implement ``_reset_state``, ``_frame`` (one frame of dynamics
    returning reward and event names), ``_objects`` and ``_status``.
    """

    status_predicates: tuple = ()
    goal_event = "goal"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._check_layout()
        self.rng = np.random.default_rng(0)
        self.frame = 0
        self.done = True

    @property
    def actions(self):
        return self.spec.actions

    @property
    def n_actions(self):
        return len(self.spec.actions)

    def _check_layout(self):
        pass

    def reset(self, seed=0) -> Scene:
        self.rng = np.random.default_rng(seed)
        self.frame = 0
        self.done = False
        self.goals = 0
        self._reset_state()
        return self.scene()

    def step(self, action: int):
        if not 0 <= int(action) < self.n_actions:
            raise EnvError(f"action {action} outside 0..{self.n_actions - 1}")
        if self.done:
            raise EnvError("step called on a finished episode; call reset")
        name = self.spec.actions[int(action)]
        total = 0.0
        events = []
        for _ in range(self.spec.action_repeat):
            reward, evs, terminal = self._frame(name)
            self.frame += 1
            total += reward
            events += evs
            if terminal or self.frame >= self.spec.episode_cap:
                self.done = True
                break
        goal = self.goal_event in events
        self.goals += events.count(self.goal_event)
        return self.scene(), total, self.done, {"goal_achieved": goal, "events": events,
                                               "goals": events.count(self.goal_event)}

    def scene(self) -> Scene:
        return Scene(self._objects(), self.spec.width, self.spec.height, self._info())

    def status_atoms(self, scene: Scene | None = None):
        """Crisp status atoms keyed by ``(predicate, args)``."""
        scene = scene or self.scene()
        return status_atoms(type(self), scene)

    def _info(self):
        return {}


def status_atoms(env_cls, scene: Scene, predicates=None):
    table = {}
    for name in (predicates or env_cls.status_predicates):
        fn = env_cls.status_fns().get(name)
        if fn is None:
            raise EnvError(f"status predicate {name!r} is not registered for {env_cls.__name__}")
        table.update({(name, args): float(v) for args, v in fn(scene).items()})
    return table


def agent_index(scene):
    return scene.of_type("agent")[0]


def world_status(fn):
    """Wrap ``scene -> bool`` as a status function over the ``world`` constant."""
    return lambda scene: {("world",): 1.0 if fn(scene) else 0.0}


def per_object_status(kind, fn):
    """Wrap ``(scene, object) -> bool`` as a status function over objects of one type."""
    def wrapped(scene):
        consts = scene.constants()
        return {(consts[i],): 1.0 if fn(scene, scene.objects[i]) else 0.0
                for i in scene.of_type(kind)}
    return wrapped


def write_replay(path, env_name, variant, seed, actions):
    Path(path).write_text(json.dumps({"env": env_name, "variant": variant, "seed": seed,
                                      "actions": [int(a) for a in actions]}))


def read_replay(path):
    return json.loads(Path(path).read_text())

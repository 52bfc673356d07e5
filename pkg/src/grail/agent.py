"""Hybrid neural/logic agent, blending, and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .concepts import ValuationNet
from .errors import CheckpointError, ConfigError
from .logiclang import BLEND_HEADS, Decls, LogicProgram
from .nn import MLP
from .reasoner import Compiler, infer_batch, normalize_scores

BLEND_MODES = ("neural", "logic")
HIDDEN = 64
FEATURES_PER_SLOT = 4  # present, x / W, y / H, orientation in {-1, 0, 1}
ORIENTATION_CODE = {"left": -1.0, "right": 1.0}
MAGIC = b"GRAILCK1"


@dataclass
class Observation:
    """Everything the agent needs about one scene, computed once per step."""

    features: np.ndarray  # flattened object slots
    atom_features: np.ndarray  # max-pooled state-atom truths, declaration order
    policy: object  # CompiledScene of the policy program
    blend: object  # CompiledScene of the blending program, or None


@dataclass
class AgentOutput:
    probs: ad.Value  # (B, A)
    beta: ad.Value  # (B,)
    value: ad.Value  # (B,)
    pi_neu: ad.Value | None
    pi_log: ad.Value


def object_features(scene, slots) -> np.ndarray:
    """Fixed-layout features; objects fill the slots of their type in scene order."""
    out = np.zeros((sum(slots.values()), FEATURES_PER_SLOT))
    start, base = {}, 0
    for kind, n in slots.items():
        start[kind] = base
        base += n
    used = dict.fromkeys(slots, 0)
    for o in scene.objects:
        if o.type not in slots or used[o.type] >= slots[o.type] or not o.visible:
            continue
        row = start[o.type] + used[o.type]
        used[o.type] += 1
        out[row] = (1.0, o.x / scene.width, o.y / scene.height,
                    ORIENTATION_CODE.get(o.orientation, 0.0))
    return out.ravel()


def blend_policies(pi_neu, pi_log, beta) -> ad.Value:
    """beta * pi_neu + (1 - beta) * pi_log with beta broadcast over actions."""
    beta = ad.as_value(beta)
    b = ad.reshape(beta, beta.shape + (1,)) if beta.ndim else beta
    return ad.add(ad.mul(b, pi_neu), ad.mul(ad.sub(1.0, b), pi_log))


def blender_entropy(beta) -> ad.Value:
    """Binary entropy of the blending weight with log clamped at 1e-7."""
    beta = ad.as_value(beta)
    return ad.neg(ad.add(ad.mul(beta, ad.safe_log(beta)),
                         ad.mul(ad.sub(1.0, beta), ad.safe_log(ad.sub(1.0, beta)))))


def policy_entropy(probs) -> ad.Value:
    """Entropy of each row of an action distribution."""
    return ad.neg(ad.sum_(ad.mul(probs, ad.safe_log(probs)), axis=-1))


class HybridAgent:
    """Neural policy theta, logic weights phi, valuation nets psi, blender lambda and critics."""

    def __init__(self, decls: Decls, policy: LogicProgram, blend: LogicProgram | None,
                 spec, status_fns, blend_mode="logic", seed=0):
        if blend_mode not in BLEND_MODES:
            raise ConfigError(f"blend_mode must be one of {BLEND_MODES}", "agent.blend_mode")
        if blend_mode == "logic" and blend is None:
            raise ConfigError("logic blending needs a blending program", "programs.blend")
        if list(decls.actions) != list(spec.actions):
            raise ConfigError(f"declared actions {decls.actions} do not match the environment's "
                              f"{spec.actions}", "programs.decls")
        rng = np.random.default_rng(seed)
        self.decls = decls
        self.policy_program = policy
        self.blend_program = blend
        self.actions = list(decls.actions)
        self.slots = dict(spec.slots)
        self.blend_mode = blend_mode
        self.state_predicates = decls.state_predicates
        self.spatial = decls.spatial
        self.status_fns = status_fns
        dtype = ad.default_dtype()
        self.nets = {p: ValuationNet(p, rng) for p in self.spatial}
        self.policy_weights = ad.Parameter(np.zeros(len(policy), dtype=dtype), name="phi")
        self.blend_weights = ad.Parameter(
            np.zeros(len(blend) if blend is not None else 0, dtype=dtype), name="lambda")
        n_feat = sum(self.slots.values()) * FEATURES_PER_SLOT
        A = len(self.actions)
        self.actor = MLP((n_feat, HIDDEN, HIDDEN, A), hidden="tanh", rng=rng,
                         final_init="small", name="theta")
        self.blender = MLP((n_feat, HIDDEN, 1), hidden="tanh", output="sigmoid", rng=rng,
                           final_init="zeros", name="blender")
        self.critic_neu = MLP((n_feat, HIDDEN, HIDDEN, 1), hidden="tanh", rng=rng,
                              final_init="small", name="v_neu")
        self.critic_log = MLP((len(self.state_predicates), HIDDEN, 1), hidden="tanh", rng=rng,
                              final_init="small", name="v_log")
        self.force_logic = False
        self.stage = None  # set by the trainer, recorded in checkpoints
        self._policy_compiler = Compiler(policy, self.actions, status_fns)
        self._blend_compiler = Compiler(blend, list(BLEND_HEADS), status_fns) if blend else None

    # ------------------------------------------------------------ parameter groups

    @property
    def psi(self):
        return [p for net in self.nets.values() for p in net.parameters]

    @property
    def theta(self):
        return self.actor.parameters

    @property
    def phi(self):
        return [self.policy_weights]

    @property
    def lam(self):
        if self.blend_mode == "neural":
            return self.blender.parameters
        return [self.blend_weights]

    @property
    def critics(self):
        return self.critic_neu.parameters + self.critic_log.parameters

    def all_parameters(self):
        return self.psi + self.theta + self.phi + [self.blend_weights] + \
            self.blender.parameters + self.critics

    def set_trainable(self, params, flag):
        for p in params:
            p.requires_grad = flag

    # ------------------------------------------------------------ observation

    def observe(self, scene) -> Observation:
        status = {}
        for name in self.decls.of_kind("status"):
            fn = self.status_fns.get(name.name)
            if fn is not None:
                for args, v in fn(scene).items():
                    status[(name.name, tuple(args))] = float(v)
        policy = self._policy_compiler.compile(scene, status)
        blend = self._blend_compiler.compile(scene, status) if self._blend_compiler else None
        return Observation(object_features(scene, self.slots),
                           self._atom_features(scene, status), policy, blend)

    def _atom_features(self, scene, status):
        """Max over groundings of each state predicate; spatial truths use the current psi."""
        out = np.zeros(len(self.state_predicates))
        pooled = {}
        for (pred, _), v in status.items():
            pooled[pred] = max(pooled.get(pred, 0.0), v)
        xy = np.array([[o.x, o.y] for o in scene.objects], dtype=np.float64).reshape(-1, 2)
        types = [o.type for o in scene.objects]
        scale = np.array([scene.width, scene.height])
        for k, pred in enumerate(self.state_predicates):
            d = self.decls[pred]
            if d.kind == "status":
                out[k] = pooled.get(pred, 0.0)
                continue
            t1, t2 = d.arg_types
            pairs = [(i, j) for i in range(len(types)) for j in range(len(types))
                     if i != j and t1 in ("*", types[i]) and t2 in ("*", types[j])]
            if pairs:
                p = np.array(pairs)
                off = np.clip((xy[p[:, 0]] - xy[p[:, 1]]) / scale, -1, 1)
                out[k] = float(self.nets[pred].numpy(off).max())
        return out

    # ------------------------------------------------------------ forward

    def forward(self, observations) -> AgentOutput:
        obs = list(observations)
        B = len(obs)
        dtype = ad.default_dtype()
        heads, _ = infer_batch([o.policy for o in obs], self.nets,
                               self._policy_compiler.spatial_order, self.policy_weights,
                               len(self.actions))
        pi_log = normalize_scores(heads)
        atoms = ad.Value(np.stack([o.atom_features for o in obs]).astype(dtype))
        v_log = ad.reshape(self.critic_log(atoms), (B,))
        if self.force_logic:
            return AgentOutput(pi_log, ad.Value(np.zeros(B, dtype=dtype)), v_log, None, pi_log)
        X = ad.Value(np.stack([o.features for o in obs]).astype(dtype))
        pi_neu = ad.softmax(self.actor(X))
        beta = self._beta(obs, X)
        probs = blend_policies(pi_neu, pi_log, beta)
        v_neu = ad.reshape(self.critic_neu(X), (B,))
        value = ad.add(ad.mul(beta, v_neu), ad.mul(ad.sub(1.0, beta), v_log))
        return AgentOutput(probs, beta, value, pi_neu, pi_log)

    def _beta(self, obs, X):
        B = len(obs)
        if self.blend_mode == "neural":
            return ad.reshape(self.blender(X), (B,))
        heads, _ = infer_batch([o.blend for o in obs], self.nets,
                               self._blend_compiler.spatial_order, self.blend_weights, 2)
        neural = ad.index(heads, (slice(None), BLEND_HEADS.index("neural_agent")))
        logic = ad.index(heads, (slice(None), BLEND_HEADS.index("logic_agent")))
        return ad.div(neural, ad.add(ad.add(neural, logic), 1e-8))

    # ------------------------------------------------------------ checkpoints

    def named_arrays(self):
        out = []
        for pred, net in self.nets.items():
            out += [(f"psi/{pred}/{i}", p) for i, p in enumerate(net.parameters)]
        out.append(("phi", self.policy_weights))
        out.append(("lambda/weights", self.blend_weights))
        out += [(f"lambda/net/{i}", p) for i, p in enumerate(self.blender.parameters)]
        out += [(f"theta/{i}", p) for i, p in enumerate(self.actor.parameters)]
        out += [(f"v_neu/{i}", p) for i, p in enumerate(self.critic_neu.parameters)]
        out += [(f"v_log/{i}", p) for i, p in enumerate(self.critic_log.parameters)]
        return out

    def manifest(self):
        return {
            "format": 1,
            "actions": self.actions,
            "predicates": self.spatial,
            "state_predicates": self.state_predicates,
            "policy_clauses": len(self.policy_program),
            "blend_clauses": len(self.blend_program) if self.blend_program else 0,
            "blend_mode": self.blend_mode,
            "stage": self.stage,
            "arrays": [{"name": n, "shape": list(p.data.shape)} for n, p in self.named_arrays()],
        }


# ---------------------------------------------------------------- agent-level operations


def policy(scene, agent: HybridAgent):
    """(pi, beta, pi_neu, pi_log) for one scene as numpy arrays."""
    with ad.no_grad():
        out = agent.forward([agent.observe(scene)])
    pi_neu = out.pi_neu.data[0] if out.pi_neu is not None else None
    return out.probs.data[0], float(out.beta.data[0]), pi_neu, out.pi_log.data[0]


def blender_beta(scene, agent: HybridAgent) -> float:
    if agent.blend_mode == "logic" and agent.blend_program is None:
        raise ConfigError("logic blending needs a blending program", "programs.blend")
    with ad.no_grad():
        obs = agent.observe(scene)
        X = ad.Value(obs.features[None].astype(ad.default_dtype()))
        return float(agent._beta([obs], X).data[0])


def value(scene, agent: HybridAgent, beta: float) -> float:
    """beta * V_neu + (1 - beta) * V_log."""
    with ad.no_grad():
        obs = agent.observe(scene)
        dtype = ad.default_dtype()
        v_log = float(agent.critic_log(obs.atom_features[None].astype(dtype)).data.ravel()[0])
        v_neu = float(agent.critic_neu(obs.features[None].astype(dtype)).data.ravel()[0])
    return beta * v_neu + (1.0 - beta) * v_log


def save_checkpoint(agent: HybridAgent, path):
    manifest = json.dumps(agent.manifest(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for _, p in agent.named_arrays():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Return (manifest, {name: float32 array})."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (n,) = struct.unpack("<I", raw[8:12])
        manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    arrays, pos = {}, 12 + n
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(shape)
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return manifest, arrays


def load_checkpoint(agent: HybridAgent, path, groups=None):
    """Copy arrays from ``path`` into ``agent``.

    ``groups`` limits loading to names starting with the given prefixes
    (e.g. ``("psi/", "phi")``). Any shape or layout mismatch raises
    :class:`CheckpointError`.
    """
    manifest, arrays = read_checkpoint(path)
    mine = agent.manifest()
    for key in ("actions", "predicates", "policy_clauses"):
        if manifest.get(key) != mine[key]:
            raise CheckpointError(f"{path}: {key} {manifest.get(key)} != {mine[key]}")
    for name, p in agent.named_arrays():
        if groups is not None and not name.startswith(tuple(groups)):
            continue
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, "
                                  f"expected {p.data.shape}")
        p.data[...] = arrays[name].astype(p.data.dtype)
    return manifest

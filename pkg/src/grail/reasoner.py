"""Grounding and differentiable forward inference.

Conjunction is the product of body truths scaled by ``sigmoid(weight)``;
groundings that share a head are combined with noisy-or. Programs are
non-recursive, so one pass suffices.

Two entry points share the same arithmetic: the per-scene API
(:func:`evaluate_atoms`, :func:`ground`, :func:`forward_infer`) and a
compiled form (:class:`Compiler`, :func:`infer_batch`) that evaluates many
scenes with one valuation-net call per predicate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .concepts import normalized_offset
from .errors import MissingAtom, MissingStatusFn, MissingValuation
from .logiclang import ANY, WORLD, Constant, LogicProgram

EPS_FLOOR = 1e-8


def atom_key(predicate, args):
    return (predicate, tuple(args))


def format_key(key):
    pred, args = key
    return f"{pred}({','.join(args)})" if args else pred


# ---------------------------------------------------------------- atom table


@dataclass
class GroundAtomTable:
    keys: list
    values: ad.Value
    provenance: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {k: i for i, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self.index

    def __getitem__(self, key) -> ad.Value:
        if key not in self.index:
            raise MissingAtom(format_key(key))
        return ad.index(self.values, self.index[key])

    def value(self, key) -> float:
        if key not in self.index:
            raise MissingAtom(format_key(key))
        return float(self.values.data[self.index[key]])

    def items(self):
        return [(k, float(v)) for k, v in zip(self.keys, self.values.data)]


def _body_predicates(program: LogicProgram, kind):
    out = []
    for c in program.clauses:
        for a in c.body:
            if program.decls[a.predicate].kind == kind and a.predicate not in out:
                out.append(a.predicate)
    return out


def _typed_pairs(scene, arg_types):
    t1, t2 = arg_types
    objs = scene.objects
    return [(i, j) for i in range(len(objs)) for j in range(len(objs))
            if i != j and t1 in (ANY, objs[i].type) and t2 in (ANY, objs[j].type)]


def _status_table(scene, names, status_fns):
    table = {}
    for name in names:
        fn = status_fns.get(name)
        if fn is None:
            raise MissingStatusFn(name)
        for args, v in fn(scene).items():
            table[atom_key(name, args)] = float(v)
    return table


def evaluate_atoms(scene, program: LogicProgram, nets, status_fns) -> GroundAtomTable:
    """Truth values of every ground atom the program can refer to in ``scene``."""
    consts = scene.constants()
    keys, crisp, prov = [], [], []
    for i, o in enumerate(scene.objects):
        keys.append(atom_key("type", (consts[i], o.type)))
        crisp.append(1.0)
        prov.append("type")
    for key, v in _status_table(scene, _body_predicates(program, "status"), status_fns).items():
        keys.append(key)
        crisp.append(v)
        prov.append("status")
    parts = [ad.Value(np.asarray(crisp, dtype=ad.default_dtype()))]
    for pred in _body_predicates(program, "spatial"):
        if pred not in nets:
            raise MissingValuation(pred)
        pairs = _typed_pairs(scene, program.decls[pred].arg_types)
        if not pairs:
            continue
        offsets = np.array([_offset(scene, i, j) for i, j in pairs])
        parts.append(nets[pred](offsets))
        for i, j in pairs:
            keys.append(atom_key(pred, (consts[i], consts[j])))
            prov.append("spatial")
    values = ad.concat(parts) if len(parts) > 1 else parts[0]
    return GroundAtomTable(keys, values, prov)


def _offset(scene, i, j):
    a, b = scene.objects[i], scene.objects[j]
    return normalized_offset(a.x, a.y, b.x, b.y, scene.width, scene.height)


# ---------------------------------------------------------------- grounding


@dataclass(frozen=True)
class GroundedClause:
    clause_index: int
    clause: object
    substitution: dict
    body: tuple  # atom keys
    head: tuple  # atom key


def _ground_clause(ci, clause, decls, types):
    """Substitutions of one clause for a scene whose objects have ``types``."""
    consts = [f"obj{i}" for i in range(len(types))]
    all_objs = set(consts)
    domains = {}

    def restrict(var, allowed):
        domains[var] = domains.get(var, allowed) & allowed

    head_decl = decls[clause.head.predicate]
    for slot, arg in enumerate(clause.head.args):
        if head_decl.arg_types[slot] == WORLD and not isinstance(arg, Constant):
            restrict(arg, {WORLD})
    body = []
    for atom in clause.body:
        d = decls[atom.predicate]
        if d.kind == "type":
            subj, kind = atom.args
            allowed = {c for c, t in zip(consts, types) if t == kind.name}
            if isinstance(subj, Constant):
                if subj.name not in allowed:
                    return []
            else:
                restrict(subj, allowed)
            continue  # consumed as a filter
        body.append(atom)
        for slot, arg in enumerate(atom.args):
            if isinstance(arg, Constant):
                continue
            t = d.arg_types[slot]
            if t == WORLD:
                restrict(arg, {WORLD})
            elif t == ANY:
                restrict(arg, all_objs)
            else:
                restrict(arg, {c for c, ty in zip(consts, types) if ty == t})
    variables = clause.variables()
    for v in variables:
        domains.setdefault(v, all_objs)
    injective = len(variables) >= 2
    out = []
    for combo in itertools.product(*(sorted(domains[v], key=_const_order) for v in variables)):
        objs = [c for c in combo if c != WORLD]
        if injective and len(set(objs)) < len(objs):
            continue
        sub = dict(zip(variables, combo))

        def resolve(atom):
            return atom_key(atom.predicate,
                            tuple(sub[a] if not isinstance(a, Constant) else a.name
                                  for a in atom.args))
        out.append(GroundedClause(ci, clause, sub, tuple(resolve(a) for a in body),
                                  resolve(clause.head)))
    return out


def _const_order(c):
    return -1 if c == WORLD else int(c[3:])


def ground(program: LogicProgram, scene) -> list:
    types = tuple(o.type for o in scene.objects)
    out = []
    for ci, clause in enumerate(program.clauses):
        out += _ground_clause(ci, clause, program.decls, types)
    return out


# ---------------------------------------------------------------- inference


def _as_weight_vector(weights):
    if isinstance(weights, ad.Value):
        return ad.reshape(weights, (-1,))
    items = list(weights)
    if items and all(isinstance(x, ad.Value) for x in items):
        return ad.stack(items)
    return ad.Value(np.asarray(items, dtype=ad.default_dtype()).reshape(-1))


def _noisy_or_matrix(group, n_groups, n_items):
    """Index matrix (n_groups, max size) into ``items + [pad]`` grouping items by id."""
    group = np.asarray(group, dtype=np.int64)
    counts = np.bincount(group, minlength=n_groups) if group.size else np.zeros(n_groups, int)
    width = max(int(counts.max()) if n_groups else 0, 1)
    mat = np.full((n_groups, width), n_items, dtype=np.int64)
    if group.size:
        order = np.argsort(group, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(group.size) - starts[group[order]]
        mat[group[order], rank] = order
    return mat


def infer_core(values: ad.Value, body_idx, clause_ids, logits: ad.Value, head_group, n_heads):
    """Head truths from a flat atom vector.

    ``body_idx`` is (G, L) into ``values`` where index ``len(values)`` stands
    for a constant 1 (padding). ``head_group`` maps each grounding to a head.
    """
    ext = ad.concat([values, ad.Value(np.ones(1, dtype=values.data.dtype))])
    G = len(clause_ids)
    if G:
        conj = ad.prod(ad.take(ext, np.asarray(body_idx, dtype=np.int64)), axis=1)
        conf = ad.mul(ad.take(ad.sigmoid(logits), np.asarray(clause_ids, dtype=np.int64)), conj)
        miss = ad.concat([ad.sub(1.0, conf), ad.Value(np.ones(1, dtype=values.data.dtype))])
    else:
        miss = ad.Value(np.ones(1, dtype=values.data.dtype))
    mat = _noisy_or_matrix(head_group, n_heads, G)
    return ad.sub(1.0, ad.prod(ad.take(miss, mat), axis=1))


def forward_infer(table: GroundAtomTable, grounded, weights) -> dict:
    """Map each supported head atom to its noisy-or truth."""
    if not grounded:
        return {}
    w = _as_weight_vector(weights)
    needed = max(g.clause_index for g in grounded) + 1
    if w.data.shape[0] < needed:
        raise ValueError(f"expected {needed} clause weights, got {w.data.shape[0]}")
    n = len(table)
    width = max(len(g.body) for g in grounded)
    body_idx = np.full((len(grounded), max(width, 1)), n, dtype=np.int64)
    heads, head_of = [], {}
    group = []
    for gi, g in enumerate(grounded):
        for k, key in enumerate(g.body):
            if key not in table.index:
                raise MissingAtom(format_key(key))
            body_idx[gi, k] = table.index[key]
        if g.head not in head_of:
            head_of[g.head] = len(heads)
            heads.append(g.head)
        group.append(head_of[g.head])
    out = infer_core(table.values, body_idx, [g.clause_index for g in grounded], w,
                     group, len(heads))
    return {h: ad.index(out, i) for i, h in enumerate(heads)}


def normalize_scores(scores: ad.Value) -> ad.Value:
    """(score + 1e-8) / sum over the last axis."""
    s = ad.add(scores, EPS_FLOOR)
    return ad.div(s, ad.sum_(s, axis=-1, keepdims=True))


def action_distribution(head_values: dict, action_order) -> ad.Value:
    """Normalized action scores; actions with several head atoms use noisy-or."""
    if not action_order:
        raise ValueError("action_order must not be empty")
    per_action = {a: [] for a in action_order}
    for (pred, _args), v in head_values.items():
        if pred in per_action:
            per_action[pred].append(v)
    scores = []
    for a in action_order:
        vs = per_action[a]
        if not vs:
            scores.append(ad.Value(np.zeros((), dtype=ad.default_dtype())))
        elif len(vs) == 1:
            scores.append(vs[0])
        else:
            scores.append(ad.sub(1.0, ad.prod(ad.sub(1.0, ad.stack(vs)), axis=0)))
    return normalize_scores(ad.stack(scores))


# ---------------------------------------------------------------- compiled path


@dataclass
class CompiledScene:
    """Grounded program for one scene, detached from the valuation nets.

    Body atoms are addressed as (segment, position): segment 0 holds crisp
    status values, segment ``k >= 1`` the ``k-1``-th spatial predicate of
    ``spatial_order`` and segment -1 is the constant 1 used for padding.
    """

    crisp: np.ndarray
    crisp_pred: np.ndarray  # index into the program's status order
    offsets: list  # per spatial predicate, (m_k, 2)
    body_seg: np.ndarray  # (G, L)
    body_pos: np.ndarray  # (G, L)
    clause: np.ndarray  # (G,)
    head: np.ndarray  # (G,) head slot


class Compiler:
    """Grounds one program against scenes, caching by the object-type layout."""

    def __init__(self, program: LogicProgram, head_order, status_fns):
        self.program = program
        self.head_order = list(head_order)
        self.head_slot = {h: i for i, h in enumerate(self.head_order)}
        self.status_fns = status_fns
        self.status_order = _body_predicates(program, "status")
        self.spatial_order = _body_predicates(program, "spatial")
        self._cache = {}

    def _template(self, types):
        hit = self._cache.get(types)
        if hit is not None:
            return hit
        grounded = []
        for ci, clause in enumerate(self.program.clauses):
            grounded += _ground_clause(ci, clause, self.program.decls, types)
        decls = self.program.decls
        consts = [f"obj{i}" for i in range(len(types))]
        pair_index = {}
        for k, pred in enumerate(self.spatial_order):
            pairs = [(i, j) for i in range(len(types)) for j in range(len(types))
                     if i != j and decls[pred].arg_types[0] in (ANY, types[i])
                     and decls[pred].arg_types[1] in (ANY, types[j])]
            pair_index[pred] = ({(consts[i], consts[j]): n for n, (i, j) in enumerate(pairs)},
                                np.array(pairs, dtype=np.int64).reshape(-1, 2))
        width = max([len(g.body) for g in grounded] + [1])
        G = len(grounded)
        seg = np.full((G, width), -1, dtype=np.int64)
        pos = np.zeros((G, width), dtype=np.int64)
        status_keys = []
        status_slot = {}
        for gi, g in enumerate(grounded):
            for li, key in enumerate(g.body):
                pred = key[0]
                kind = decls[pred].kind
                if kind == "spatial":
                    seg[gi, li] = 1 + self.spatial_order.index(pred)
                    pos[gi, li] = pair_index[pred][0][key[1]]
                else:
                    if key not in status_slot:
                        status_slot[key] = len(status_keys)
                        status_keys.append(key)
                    seg[gi, li] = 0
                    pos[gi, li] = status_slot[key]
        clause = np.array([g.clause_index for g in grounded], dtype=np.int64)
        head = np.array([self.head_slot[g.head[0]] for g in grounded], dtype=np.int64)
        hit = (status_keys, [pair_index[p][1] for p in self.spatial_order], seg, pos, clause,
               head)
        self._cache[types] = hit
        return hit

    def compile(self, scene, status=None) -> CompiledScene:
        types = tuple(o.type for o in scene.objects)
        status_keys, pairs, seg, pos, clause, head = self._template(types)
        if status is None:
            status = _status_table(scene, self.status_order, self.status_fns)
        crisp = np.empty(len(status_keys))
        for i, key in enumerate(status_keys):
            if key not in status:
                if key[0] not in self.status_fns:
                    raise MissingStatusFn(key[0])
                raise MissingAtom(format_key(key))
            crisp[i] = status[key]
        crisp_pred = np.array([self.status_order.index(k[0]) for k in status_keys],
                              dtype=np.int64)
        xy = np.array([[o.x, o.y] for o in scene.objects], dtype=np.float64).reshape(-1, 2)
        scale = np.array([scene.width, scene.height])
        offsets = [np.clip((xy[p[:, 0]] - xy[p[:, 1]]) / scale, -1, 1) if len(p)
                   else np.zeros((0, 2)) for p in pairs]
        return CompiledScene(crisp, crisp_pred, offsets, seg, pos, clause, head)


def infer_batch(compiled, nets, spatial_order, logits: ad.Value, n_heads):
    """Head truths for a batch of compiled scenes, shape (B, n_heads).

    Returns ``(heads, spatial)`` where ``spatial`` lists the per-predicate
    valuation outputs (each a Value over the concatenated atoms of the batch)
    together with the per-scene atom counts.
    """
    B = len(compiled)
    dtype = ad.default_dtype()
    n_seg = 1 + len(spatial_order)
    counts = np.zeros((B, n_seg), dtype=np.int64)
    for b, c in enumerate(compiled):
        counts[b, 0] = len(c.crisp)
        for k, off in enumerate(c.offsets):
            counts[b, 1 + k] = len(off)
    seg_sizes = counts.sum(axis=0)
    seg_base = np.concatenate([[0], np.cumsum(seg_sizes)])
    within = np.cumsum(counts, axis=0) - counts  # start of scene b inside its segment
    parts = [ad.Value(np.concatenate([c.crisp for c in compiled]).astype(dtype)
                      if seg_sizes[0] else np.zeros(0, dtype=dtype))]
    spatial = []
    for k, pred in enumerate(spatial_order):
        if seg_sizes[1 + k] == 0:
            spatial.append(None)
            parts.append(ad.Value(np.zeros(0, dtype=dtype)))
            continue
        if pred not in nets:
            raise MissingValuation(pred)
        out = nets[pred](np.concatenate([c.offsets[k] for c in compiled]))
        spatial.append(out)
        parts.append(out)
    values = ad.concat(parts)
    one = int(seg_base[-1])
    body, clause, group = [], [], []
    width = max([c.body_seg.shape[1] for c in compiled if len(c.clause)] + [1])
    for b, c in enumerate(compiled):
        if not len(c.clause):
            continue
        seg = c.body_seg
        idx = np.where(seg < 0, one, seg_base[np.maximum(seg, 0)]
                       + within[b, np.maximum(seg, 0)] + c.body_pos)
        if idx.shape[1] < width:
            idx = np.pad(idx, ((0, 0), (0, width - idx.shape[1])), constant_values=one)
        body.append(idx)
        clause.append(c.clause)
        group.append(b * n_heads + c.head)
    if body:
        body_idx = np.concatenate(body)
        clause_ids = np.concatenate(clause)
        groups = np.concatenate(group)
    else:
        body_idx = np.zeros((0, 1), dtype=np.int64)
        clause_ids = np.zeros(0, dtype=np.int64)
        groups = np.zeros(0, dtype=np.int64)
    heads = infer_core(values, body_idx, clause_ids, logits, groups, B * n_heads)
    return ad.reshape(heads, (B, n_heads)), (spatial, counts[:, 1:])

"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond plain data classes, so a bug
in the library cannot hide in its own oracle.
"""

import itertools

import numpy as np

WORLD = "world"


def crisp_truth(salt, x1, y1, x2, y2):
    """Deterministic 0/1 truth of a spatial atom from integer coordinates."""
    h = (int(x1 - x2) * 73856093) ^ (int(y1 - y2) * 19349663) ^ (salt * 83492791)
    return (h >> 3) & 1


def forward_chain(clauses, decls, objects, status, spatial_salt):
    """Boolean forward chaining for one non-recursive program.

    ``clauses`` are ``(head, body)`` with atoms ``(pred, [arg, ...])``, where an
    argument is a variable name (uppercase) or a constant. ``decls`` maps a
    predicate to ``(kind, arg_types)``. ``objects`` is a list of
    ``(type, x, y)``; object ``i`` is the constant ``obj{i}``. ``status`` maps
    ``(pred, args)`` to 0/1. Returns the set of true head atoms.
    """
    consts = [f"obj{i}" for i in range(len(objects))]
    obj = dict(zip(consts, objects))

    def slot_ok(value, arg_type):
        if arg_type == WORLD:
            return value == WORLD
        if value == WORLD:
            return False
        return arg_type == "*" or obj[value][0] == arg_type

    def holds(pred, args):
        kind, types = decls[pred]
        if pred == "type":
            return args[0] != WORLD and obj[args[0]][0] == args[1]
        if not all(slot_ok(a, t) for a, t in zip(args, types)):
            return False
        if kind == "status":
            return status.get((pred, tuple(args)), 0) == 1
        if kind == "spatial":
            (_, x1, y1), (_, x2, y2) = obj[args[0]], obj[args[1]]
            return args[0] != args[1] and crisp_truth(spatial_salt[pred], x1, y1, x2, y2) == 1
        raise ValueError(kind)

    true_heads = set()
    for head, body in clauses:
        variables = []
        for _, args in [head, *body]:
            for a in args:
                if a[:1].isupper() and a not in variables:
                    variables.append(a)
        for combo in itertools.product(consts + [WORLD], repeat=len(variables)):
            sub = dict(zip(variables, combo))
            objs = [v for v in combo if v != WORLD]
            if len(variables) >= 2 and len(set(objs)) < len(objs):
                continue

            def resolve(args):
                return [sub.get(a, a) for a in args]

            head_args = resolve(head[1])
            _, head_types = decls[head[0]]
            if any(t == WORLD and a != WORLD for a, t in zip(head_args, head_types)):
                continue
            if all(holds(p, resolve(args)) for p, args in body):
                true_heads.add((head[0], tuple(head_args)))
    return true_heads


def gae_double_loop(rewards, values, dones, bootstrap, gamma, lam):
    """Advantages by the explicit sum over future TD residuals.

    A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at the end of the episode.
    """
    T, N = rewards.shape
    adv = np.zeros((T, N))
    for n in range(N):
        for t in range(T):
            total, coef = 0.0, 1.0
            for k in range(t, T):
                nxt = values[k + 1, n] if k + 1 < T else bootstrap[n]
                live = 1.0 - dones[k, n]
                delta = rewards[k, n] + gamma * nxt * live - values[k, n]
                total += coef * delta
                if dones[k, n]:
                    break
                coef *= gamma * lam
            adv[t, n] = total
    return adv


# ---------------------------------------------------------------- random crisp instances

CRISP_DECLS = {
    "act_w": ("action", ("world",)),
    "act_o": ("action", ("*",)),
    "near": ("spatial", ("*", "*")),
    "above": ("spatial", ("agent", "ladder")),
    "flag_w": ("status", ("world",)),
    "flag_o": ("status", ("*",)),
    "type": ("type", ("*", "*")),
}
TYPES = ("agent", "ladder", "monkey")
SALT = {"near": 1, "above": 2}


def _random_clause(rng):
    vars_ = ["X", "Y", "Z"]
    head_pred = "act_w" if rng.random() < 0.5 else "act_o"
    body = []
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["type", "near", "above", "flag_w", "flag_o"])
        if kind == "type":
            body.append(("type", [str(rng.choice(vars_)), str(rng.choice(TYPES))]))
        elif kind in ("near", "above"):
            a, b = rng.choice(vars_, size=2, replace=False)
            body.append((str(kind), [str(a), str(b)]))
        else:
            body.append((str(kind), [str(rng.choice(vars_))]))
    body_vars = [a for _, args in body for a in args if a[:1].isupper()]
    head_var = str(rng.choice(body_vars)) if head_pred == "act_o" else "W"
    return (head_pred, [head_var]), body


def render(clauses):
    def atom(a):
        return f"{a[0]}({','.join(a[1])})"
    return "\n".join(f"{atom(h)} :- {', '.join(atom(b) for b in body)}." for h, body in clauses)


def random_crisp_case(rng):
    """(clauses, program text, objects, status) with <= 8 clauses and <= 5 objects."""
    clauses = [_random_clause(rng) for _ in range(int(rng.integers(1, 9)))]
    n = int(rng.integers(1, 6))
    objects = []
    used = set()
    while len(objects) < n:
        x, y = int(rng.integers(0, 161)), int(rng.integers(0, 211))
        if (x, y) in used:
            continue
        used.add((x, y))
        objects.append((str(rng.choice(TYPES)), x, y))
    status = {("flag_w", (WORLD,)): int(rng.integers(2))}
    for i in range(n):
        status[("flag_o", (f"obj{i}",))] = int(rng.integers(2))
    return clauses, render(clauses), objects, status

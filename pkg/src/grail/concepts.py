"""Learnable valuation functions, the alignment grid and the concept-alignment loss."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import MissingProxy, NonfiniteInput
from .nn import MLP
from .proxy import ProxyFn, load_proxy, load_proxy_dir, parse_proxy  # noqa: F401

VALUATION_SIZES = (2, 64, 32, 1)


class ValuationNet:
    """Soft truth of one binary spatial predicate as a function of the
    normalized offset (dx, dy) between the reference object and the other one."""

    def __init__(self, predicate: str, rng=None):
        self.predicate = predicate
        self.mlp = MLP(VALUATION_SIZES, hidden="relu", output="sigmoid", rng=rng,
                       final_init="zeros", name=f"v[{predicate}]")

    @property
    def parameters(self):
        return self.mlp.parameters

    def __call__(self, offsets) -> ad.Value:
        """``offsets`` is (N, 2); returns an (N,) Value of truths in (0, 1)."""
        x = np.clip(np.asarray(offsets, dtype=self.mlp.weights[0].data.dtype), -1.0, 1.0)
        out = self.mlp(x.reshape(-1, 2))
        return ad.reshape(out, (x.shape[0],) if x.ndim == 2 else ())

    def numpy(self, offsets):
        with ad.no_grad():
            return np.asarray(self(offsets).data, dtype=np.float64)


def normalized_offset(x1, y1, x2, y2, width, height):
    """((x1 - x2) / W, (y1 - y2) / H) clamped to [-1, 1]."""
    vals = np.array([x1, y1, x2, y2, width, height], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise NonfiniteInput(f"non-finite coordinates {vals.tolist()}")
    if width <= 0 or height <= 0:
        raise NonfiniteInput(f"frame size must be positive, got {width}x{height}")
    return (float(np.clip((x1 - x2) / width, -1, 1)), float(np.clip((y1 - y2) / height, -1, 1)))


def eval_valuation(net: ValuationNet, x1, y1, x2, y2, width, height) -> ad.Value:
    dx, dy = normalized_offset(x1, y1, x2, y2, width, height)
    return net(np.array([[dx, dy]]))[0]


@dataclass(frozen=True)
class AlignmentGrid:
    K: int
    offsets: np.ndarray  # (K*K, 2), row-major: r outer, c inner

    @property
    def dx(self):
        return self.offsets[:, 0]

    @property
    def dy(self):
        return self.offsets[:, 1]


@functools.lru_cache(maxsize=16)
def build_grid(K: int = 49) -> AlignmentGrid:
    if int(K) != K or K < 1:
        raise ValueError(f"grid resolution must be a positive integer, got {K}")
    K = int(K)
    axis = 2.0 * np.arange(1, K + 1) / (K + 1) - 1.0
    dy, dx = np.meshgrid(axis, axis, indexing="ij")
    offsets = np.stack([dx.ravel(), dy.ravel()], axis=1)
    offsets.setflags(write=False)
    return AlignmentGrid(K, offsets)


def bce(target, pred: ad.Value) -> ad.Value:
    """Elementwise -[t log y + (1 - t) log(1 - y)] with the prediction on the tape."""
    t = ad.as_value(target, like=pred)
    return ad.neg(ad.add(ad.mul(t, ad.safe_log(pred)),
                         ad.mul(ad.sub(1.0, t), ad.safe_log(ad.sub(1.0, pred)))))


def concept_alignment_loss(nets, proxies, grid: AlignmentGrid, aligned) -> ad.Value:
    """Mean over aligned predicates of the grid-mean BCE(proxy, net).

    Proxy values are targets and enter as constants.
    """
    aligned = list(aligned)
    if not aligned:
        raise ValueError("concept alignment needs at least one aligned predicate")
    terms = []
    for p in aligned:
        if p not in proxies:
            raise MissingProxy(p)
        if p not in nets:
            raise MissingProxy(f"no valuation net for {p}")
        target = proxy_targets(proxies[p], grid)
        terms.append(ad.mean(bce(target, nets[p](grid.offsets))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


_target_cache: dict = {}


def proxy_targets(proxy: ProxyFn, grid: AlignmentGrid):
    key = (id(proxy), grid.K)
    hit = _target_cache.get(key)
    if hit is None or hit[0] is not proxy:
        hit = (proxy, proxy(grid.dx, grid.dy))
        _target_cache[key] = hit
    return hit[1]


def bce_floor(proxies, grid: AlignmentGrid, aligned):
    """Smallest attainable alignment loss: mean binary entropy of the targets."""
    vals = []
    for p in aligned:
        t = np.clip(proxy_targets(proxies[p], grid), 1e-7, 1 - 1e-7)
        vals.append(float(np.mean(-(t * np.log(t) + (1 - t) * np.log(1 - t)))))
    return float(np.mean(vals))


def anneal_factor(t, T, gamma_ca) -> float:
    """Multiplier 1 - gamma_ca * t / T on the alignment term."""
    if T <= 0:
        raise ValueError(f"total steps must be positive, got {T}")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return 1.0 - gamma_ca * (t / T)


# ---------------------------------------------------------------- heatmaps


@dataclass
class Heatmap:
    predicate: str
    mode: str
    values: np.ndarray  # (rows, cols) in [0, 1]
    width: float
    height: float

    def to_csv(self) -> str:
        rows, cols = self.values.shape
        lines = ["# predicate,mode,rows,cols,W,H",
                 f"# {self.predicate},{self.mode},{rows},{cols},{_fmt(self.width)},{_fmt(self.height)}"]
        for row in self.values:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def to_ppm(self) -> bytes:
        rows, cols = self.values.shape
        pix = np.round(np.clip(self.values, 0, 1) * 255).astype(np.uint8)
        return f"P5\n{cols} {rows}\n255\n".encode() + pix.tobytes()

    def save(self, path):
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text(self.to_csv())
        elif path.suffix == ".ppm":
            path.write_bytes(self.to_ppm())
        else:
            raise ValueError(f"heatmap output must end in .csv or .ppm, got {path.name}")


def _fmt(v):
    return format(float(v), ".10g")


def read_heatmap_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    meta = lines[1].lstrip("# ").split(",")
    values = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]])
    return Heatmap(meta[0], meta[1], values, float(meta[4]), float(meta[5]))


def _evaluate(target, offsets):
    if isinstance(target, ValuationNet):
        return target.numpy(offsets)
    return target(offsets[:, 0], offsets[:, 1])


def _name(target):
    return target.predicate


def scene_positions(width, height, resolution):
    """Cell-centre player positions, rows top to bottom (y grows downwards)."""
    xs = (np.arange(resolution) + 0.5) * width / resolution
    ys = (np.arange(resolution) + 0.5) * height / resolution
    return xs, ys


def export_heatmap(target, mode="offset", resolution=49, scene=None, anchor=None) -> Heatmap:
    """Dense truth-value grid of a valuation net or a proxy.

    ``offset`` mode evaluates the alignment grid of size ``resolution``
    (rows follow dy, columns dx). ``scene`` mode moves a hypothetical player
    over cell centres of the W x H frame and evaluates the predicate against
    ``scene.objects[anchor]``.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    if mode == "offset":
        grid = build_grid(resolution)
        vals = _evaluate(target, grid.offsets).reshape(resolution, resolution)
        return Heatmap(_name(target), "offset", vals, 2.0, 2.0)
    if mode != "scene":
        raise ValueError(f"unknown heatmap mode {mode!r}")
    if scene is None or anchor is None:
        raise ValueError("scene mode needs a scene and an anchor object index")
    if not 0 <= anchor < len(scene.objects):
        raise IndexError(f"anchor {anchor} out of range for {len(scene.objects)} objects")
    obj = scene.objects[anchor]
    xs, ys = scene_positions(scene.width, scene.height, resolution)
    px, py = np.meshgrid(xs, ys)
    offsets = np.stack([(px.ravel() - obj.x) / scene.width,
                        (py.ravel() - obj.y) / scene.height], axis=1)
    offsets = np.clip(offsets, -1, 1)
    vals = _evaluate(target, offsets).reshape(resolution, resolution)
    return Heatmap(_name(target), "scene", vals, float(scene.width), float(scene.height))


def scene_value(target, scene, anchor, x, y) -> float:
    """Truth for a player standing at (x, y) relative to the anchor object."""
    obj = scene.objects[anchor]
    dx, dy = normalized_offset(x, y, obj.x, obj.y, scene.width, scene.height)
    return float(_evaluate(target, np.array([[dx, dy]]))[0])


def half_grid_means(net, K=49):
    """Mean activation on the dx < 0 and dx > 0 halves of the offset grid."""
    grid = build_grid(K)
    vals = _evaluate(net, grid.offsets)
    return float(vals[grid.dx < 0].mean()), float(vals[grid.dx > 0].mean())


def load_proxies(directory, predicates=None):
    proxies = load_proxy_dir(directory)
    if predicates is not None:
        missing = [p for p in predicates if p not in proxies]
        if missing:
            raise MissingProxy(", ".join(missing))
    return proxies


def align_to_proxies(nets, proxies, aligned=None, steps=2000, lr=1e-3, K=49):
    """Fit valuation nets to their proxies with the alignment loss alone.

    Each net gets its own Adam optimizer; returns ``{predicate: final loss}``.
    """
    grid = build_grid(K)
    out = {}
    for pred in (aligned if aligned is not None else [p for p in nets if p in proxies]):
        net = nets[pred]
        opt = ad.Adam(net.parameters, lr=lr)
        for _ in range(steps):
            ad.backward(concept_alignment_loss(nets, proxies, grid, [pred]))
            opt.step()
        with ad.no_grad():
            out[pred] = float(concept_alignment_loss(nets, proxies, grid, [pred]).data)
    return out

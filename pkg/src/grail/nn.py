"""Dense feed-forward networks built on :mod:`grail.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid, None: None}


def glorot_uniform(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class MLP:
    """Stack of dense layers.

    Hidden layers use Glorot-uniform weights and zero biases. ``final_init`` is
    ``"zeros"`` (output starts at the activation of 0), ``"small"`` (normal with
    std 0.01) or ``"glorot"``.
    """

    def __init__(self, sizes, hidden="relu", output=None, rng=None, final_init="zeros",
                 name="mlp"):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = ad.default_dtype()
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden = hidden
        self.output = output
        self.name = name
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            last = i == n_layers - 1
            if last and final_init == "zeros":
                w = np.zeros((fan_in, fan_out), dtype=dtype)
            elif last and final_init == "small":
                w = (rng.standard_normal((fan_in, fan_out)) * 0.01).astype(dtype)
            else:
                w = glorot_uniform(rng, fan_in, fan_out, dtype)
            self.weights.append(ad.Parameter(w, name=f"{name}.w{i}"))
            self.biases.append(ad.Parameter(np.zeros(fan_out, dtype=dtype), name=f"{name}.b{i}"))

    @property
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_trainable(self, flag: bool):
        for p in self.parameters:
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def __call__(self, x) -> ad.Value:
        h = ad.as_value(x, like=self.weights[0])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            act = ACTIVATIONS[self.output if i == last else self.hidden]
            if act is not None:
                h = act(h)
        return h

    def arrays(self):
        return [p.data for p in self.parameters]

    def load_arrays(self, arrays):
        for p, a in zip(self.parameters, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"{p.name}: shape {a.shape} != {p.data.shape}")
            p.data[...] = a

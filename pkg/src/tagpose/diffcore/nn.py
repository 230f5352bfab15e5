"""Minimal module/parameter machinery on top of :mod:`tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import Value

ACTIVATIONS = {
    "relu": Value.relu,
    "tanh": Value.tanh,
    "softplus": Value.softplus,
}


class Module:
    """Holds named parameters (trainable Values) and buffers (fixed arrays).

    Children registered as attributes are walked in assignment order, which
    makes parameter naming and ordering deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def param(self, name, data):
        v = Value(np.asarray(data, dtype=np.float64), name=name)
        self._params[name] = v
        object.__setattr__(self, name, v)
        return v

    def buffer(self, name, data):
        arr = np.asarray(data, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def set_buffer(self, name, data):
        if name not in self._buffers:
            raise KeyError(name)
        self.buffer(name, np.asarray(data, dtype=np.float64).reshape(self._buffers[name].shape))

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = {name: None for name, _ in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name in buffers:
            owner, leaf = self._resolve(name)
            owner.set_buffer(leaf, state[name])

    def _resolve(self, dotted):
        parts = dotted.split(".")
        mod = self
        for part in parts[:-1]:
            mod = mod._children[part]
        return mod, parts[-1]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, n_in, n_out, rng, gain=1.0):
        super().__init__()
        self.param("weight", rng.standard_normal((n_in, n_out)) * gain * np.sqrt(2.0 / n_in))
        self.param("bias", np.zeros(n_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class MLP(Module):
    """Affine layers with an elementwise nonlinearity between them."""

    def __init__(self, sizes, rng, activation="relu", final_gain=1.0):
        super().__init__()
        self.activation = activation
        self.n_layers = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = final_gain if i == self.n_layers - 1 else 1.0
            setattr(self, f"l{i}", Linear(a, b, rng, gain))

    def __call__(self, x):
        act = ACTIVATIONS[self.activation]
        for i in range(self.n_layers):
            x = getattr(self, f"l{i}")(x)
            if i < self.n_layers - 1:
                x = act(x)
        return x

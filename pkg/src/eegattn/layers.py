"""Minimal module system: parameter bookkeeping and the standard layers."""

from __future__ import annotations

import copy
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from eegattn import tensor as T
from eegattn.tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Container for trainable parameters, fixed buffers and running state.

    ``params`` are learnable; ``buffers`` are fixed values that count toward
    the total parameter footprint (e.g. DCT bases); ``state`` holds running
    statistics that count toward neither.
    """

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.state: Dict[str, np.ndarray] = {}
        self.children: Dict[str, "Module"] = {}
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _walk(self, prefix="") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child._walk(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, mod in self._walk():
            for name, p in mod.params.items():
                yield prefix + name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self._walk():
            for name, b in mod.buffers.items():
                yield prefix + name, b

    def named_state(self):
        for prefix, mod in self._walk():
            for name, s in mod.state.items():
                yield prefix + name, s

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        out.update(self.named_state())
        return out

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        expected = set(self.state_dict())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for prefix, mod in self._walk():
            for name, p in mod.params.items():
                _copy_into(p.data, arrays[prefix + name], prefix + name)
            for table in (mod.buffers, mod.state):
                for name, arr in table.items():
                    _copy_into(arr, arrays[prefix + name], prefix + name)

    def train(self, mode: bool = True):
        for _, mod in self._walk():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast every parameter, buffer and state array in place."""
        for _, mod in self._walk():
            for p in mod.params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for table in (mod.buffers, mod.state):
                for name in table:
                    table[name] = table[name].astype(dtype)
        return self

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def n_fixed(self) -> int:
        return int(sum(b.size for _, b in self.named_buffers()))


def _copy_into(dst: np.ndarray, src: np.ndarray, name: str):
    if dst.shape != np.shape(src):
        raise ValueError(f"{name}: shape {np.shape(src)} != expected {dst.shape}")
    dst[...] = src


class BatchNorm(Module):
    def __init__(self, n: int, axis: int = 1, dtype=np.float32):
        super().__init__()
        self.axis = axis
        self.params["weight"] = Tensor(np.ones(n, dtype=dtype), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        self.state["running_mean"] = np.zeros(n, dtype=dtype)
        self.state["running_var"] = np.ones(n, dtype=dtype)

    def forward(self, x):
        return T.batchnorm(
            x,
            self.params["weight"],
            self.params["bias"],
            self.state["running_mean"],
            self.state["running_var"],
            self.training,
            axis=self.axis,
        )


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x):
        return T.dropout(x, self.p, self.training, self.rng)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.params["weight"] = uniform_init(rng, (n_out, n_in), n_in, dtype)
        if bias:
            self.params["bias"] = uniform_init(rng, (n_out,), n_in, dtype)

    def forward(self, x):
        return T.linear(x, self.params["weight"], self.params.get("bias"))


class MLP(Module):
    """Bias-free two-layer bottleneck ``W2 relu(W1 s)`` shared by the SE family."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng, dtype=np.float32):
        super().__init__()
        self.params["w1"] = uniform_init(rng, (n_hidden, n_in), n_in, dtype)
        self.params["w2"] = uniform_init(rng, (n_out, n_hidden), n_hidden, dtype)

    def forward(self, s):
        h = T.relu(T.einsum("bc,hc->bh", s, self.params["w1"]))
        return T.einsum("bh,oh->bo", h, self.params["w2"])

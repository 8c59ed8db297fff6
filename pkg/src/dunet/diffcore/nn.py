from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Parameter container; parameters and children are discovered from attributes."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: arr.copy() for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        for name in buffers:
            self._set_buffer(name, np.asarray(state[name], dtype=np.float64))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            setattr(self, head, value.copy())
            return
        child = getattr(self, head)
        if isinstance(child, (list, tuple)):
            idx, _, rest = rest.partition(".")
            child = child[int(idx)]
        child._set_buffer(rest, value)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None,
                 bias: bool = True, zero: bool = False):
        if zero or rng is None:
            w = np.zeros((din, dout))
            b = np.zeros(dout)
        else:
            w = uniform_fan_in(rng, din, (din, dout))
            b = uniform_fan_in(rng, din, (dout,))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True) if bias else None

    @property
    def din(self):
        return self.weight.shape[0]

    @property
    def dout(self):
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, d: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.state = ops.BatchNormState(d, momentum, eps)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def _set_buffer(self, dotted, value):
        setattr(self.state, dotted, value.copy())

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.training, self.state)


class MLP(Module):
    """Linear layers with ReLU in between (none after the last)."""

    def __init__(self, dims, rng: np.random.Generator | None, zero_last: bool = False):
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng, zero=zero_last and i == n - 1)
                       for i in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x

    def numpy(self, x: np.ndarray) -> np.ndarray:
        """Plain array evaluation, no graph."""
        for i, layer in enumerate(self.layers):
            x = x @ layer.weight.data
            if layer.bias is not None:
                x = x + layer.bias.data
            if i < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x

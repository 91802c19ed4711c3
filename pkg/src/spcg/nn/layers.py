"""Sparse convolution layers with hand-written reverse-mode gradients.

Every layer caches what its backward pass needs during ``forward``; a
layer therefore supports one pending backward per forward call.  Features
are float64 throughout.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..sparse_tensor import OccupancyRole, SparseTensor, kernel_offsets


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class Module:
    """Minimal parameter container: attributes that are Params or Modules register themselves."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward(self, x: SparseTensor) -> SparseTensor:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class SConv(Module):
    """Submanifold sparse convolution: output coordinates equal input coordinates."""

    kind = "SConv"

    def __init__(self, cin: int, cout: int, k: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.offsets = kernel_offsets(k)
        K = self.offsets.shape[0]
        rng = rng or np.random.default_rng(0)
        self.weight = Param(he_uniform(rng, K * cin, (K, cin, cout)))
        self.bias = Param(np.zeros(cout))
        self._cache = None

    def _wcat(self) -> np.ndarray:
        K = self.offsets.shape[0]
        return self.weight.value.transpose(1, 0, 2).reshape(self.cin, K * self.cout)

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.cin:
            raise ValueError(f"channel mismatch: expected {self.cin}, got {x.channels}")
        n = len(x)
        K = self.offsets.shape[0]
        if self.k == 1:
            out = x.feats @ self.weight.value[0] + self.bias.value
            self._cache = (x.feats, None)
        else:
            A, At = x.coordset.kernel_matrix(self.k)
            y = (x.feats @ self._wcat()).reshape(n * K, self.cout)
            out = A @ y + self.bias.value
            self._cache = (x.feats, At)
        return SparseTensor(x.coordset, out, x.role)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, At = self._cache
        self.bias.grad += grad.sum(axis=0)
        if At is None:
            self.weight.grad[0] += x.T @ grad
            return grad @ self.weight.value[0].T
        K = self.offsets.shape[0]
        # z[j, s] collects the output gradients that input j fed through kernel slot s
        z = (At @ grad).reshape(x.shape[0], K * self.cout)
        wcat = self._wcat()
        self.weight.grad += (x.T @ z).reshape(self.cin, K, self.cout).transpose(1, 0, 2)
        return z @ wcat.T


class SConvDown(Module):
    """Stride-2 sparse convolution over the 2x2x2 children of each parent voxel."""

    kind = "SConvDown"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.cin, self.cout = cin, cout
        rng = rng or np.random.default_rng(0)
        self.weight = Param(he_uniform(rng, 8 * cin, (8, cin, cout)))
        self.bias = Param(np.zeros(cout))
        self._cache = None

    def _wcat(self) -> np.ndarray:
        return self.weight.value.transpose(1, 0, 2).reshape(self.cin, 8 * self.cout)

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.cin:
            raise ValueError(f"channel mismatch: expected {self.cin}, got {x.channels}")
        out_cs = x.coordset.downscaled()
        A, At = out_cs.down_matrix(x.coordset)
        y = (x.feats @ self._wcat()).reshape(len(x) * 8, self.cout)
        out = A @ y + self.bias.value
        self._cache = (x.feats, At)
        return SparseTensor(out_cs, out, OccupancyRole.POV)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, At = self._cache
        self.bias.grad += grad.sum(axis=0)
        z = (At @ grad).reshape(x.shape[0], 8 * self.cout)
        self.weight.grad += (x.T @ z).reshape(self.cin, 8, self.cout).transpose(1, 0, 2)
        return z @ self._wcat().T


class TSConvUp(Module):
    """Generative transposed convolution: each voxel emits all 8 children."""

    kind = "TSConvUp"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.cin, self.cout = cin, cout
        rng = rng or np.random.default_rng(0)
        self.weight = Param(he_uniform(rng, cin, (8, cin, cout)))
        self.bias = Param(np.zeros(cout))
        self._cache = None

    def _wcat(self) -> np.ndarray:
        return self.weight.value.transpose(1, 0, 2).reshape(self.cin, 8 * self.cout)

    def forward(self, x: SparseTensor) -> SparseTensor:
        if x.channels != self.cin:
            raise ValueError(f"channel mismatch: expected {self.cin}, got {x.channels}")
        out_cs = x.coordset.upscaled()
        out = (x.feats @ self._wcat()).reshape(len(x) * 8, self.cout) + self.bias.value
        self._cache = x.feats
        return SparseTensor(out_cs, out, OccupancyRole.MP_POV)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._cache
        g = grad.reshape(x.shape[0], 8 * self.cout)
        dw = (x.T @ g).reshape(self.cin, 8, self.cout).transpose(1, 0, 2)
        self.weight.grad += dw
        self.bias.grad += grad.sum(axis=0)
        return g @ self._wcat().T


class ReLU(Module):
    kind = "ReLU"

    def forward(self, x):
        self._mask = x.feats > 0
        return x.with_feats(np.where(self._mask, x.feats, 0.0))

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # both branches are evaluated on clipped input, so no overflow warnings
    zc = np.clip(z, -500, 500)
    e = np.exp(-np.abs(zc))
    return np.where(zc >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Module):
    kind = "Sigmoid"

    def forward(self, x):
        self._out = sigmoid(x.feats)
        return x.with_feats(self._out)

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class IRNUnit(Module):
    """Two parallel receptive-field branches, concatenated, projected, plus residual.

    branch A: SConv k^3 C->C/2, ReLU
    branch B: SConv 1^3 C->C/2, ReLU, SConv k^3 C/2->C/2, ReLU
    merge:    concat -> SConv 1^3 C->C, added to the input
    """

    kind = "IRN"

    def __init__(self, C: int, k: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        if C % 2:
            raise ValueError(f"IRN unit needs an even channel count, got {C}")
        h = C // 2
        self.C = C
        self.a = Sequential(SConv(C, h, k, rng), ReLU())
        self.b = Sequential(SConv(C, h, 1, rng), ReLU(), SConv(h, h, k, rng), ReLU())
        self.merge = SConv(C, C, 1, rng)

    def forward(self, x):
        if x.channels != self.C:
            raise ValueError(f"channel mismatch: expected {self.C}, got {x.channels}")
        ha = self.a.forward(x)
        hb = self.b.forward(x)
        cat = x.with_feats(np.concatenate([ha.feats, hb.feats], axis=1))
        m = self.merge.forward(cat)
        return x.with_feats(x.feats + m.feats)

    def backward(self, grad):
        dcat = self.merge.backward(grad)
        h = self.C // 2
        return grad + self.a.backward(dcat[:, :h]) + self.b.backward(dcat[:, h:])


class DFA(Sequential):
    """Deep feature aggregation: a stack of IRN units at fixed resolution."""

    kind = "DFA"

    def __init__(self, C: int, k: int = 3, units: int = 3, rng: np.random.Generator | None = None):
        super().__init__(*[IRNUnit(C, k, rng) for _ in range(units)])


class OOL(Module):
    """Output layers: SConv k^3 C->C, ReLU, SConv k^3 C->C/2, ReLU, SConv 1^3 C/2->out.

    ``mode='probability'`` appends a sigmoid (one output channel);
    ``mode='offset'`` emits raw 3-vectors.
    """

    kind = "OOL"

    def __init__(self, C: int, k: int = 3, mode: str = "probability",
                 rng: np.random.Generator | None = None, zero_head: bool = True):
        super().__init__()
        if mode not in ("probability", "offset"):
            raise ValueError(f"unknown OOL mode {mode!r}")
        self.mode = mode
        out = 1 if mode == "probability" else 3
        self.head = Sequential(
            SConv(C, C, k, rng), ReLU(),
            SConv(C, C // 2, k, rng), ReLU(),
            SConv(C // 2, out, 1, rng),
        )
        if zero_head:
            last = self.head.layers[-1]
            last.weight.value[...] = 0.0
        self._sig = Sigmoid()

    def forward_raw(self, x):
        return self.head.forward(x)

    def backward_raw(self, grad):
        return self.head.backward(grad)

    def forward(self, x):
        y = self.head.forward(x)
        if self.mode == "probability":
            return self._sig.forward(y)
        return y

    def backward(self, grad):
        if self.mode == "probability":
            grad = self._sig.backward(grad)
        return self.head.backward(grad)

"""Stateful layers built on :mod:`imcnet.tensor.ops`.

A layer caches what it needs during ``forward`` and consumes the cache in
``backward``, which returns the input gradient and accumulates parameter
gradients into ``Parameter.grad``. Each layer instance is therefore called
at most once per forward pass; shared weights are applied by batching.
"""
import math

import numpy as np

from imcnet.tensor import ops


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    """Minimal container: tracks Parameters and child Modules by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        from imcnet.errors import CheckpointError

        own = dict(self.named_parameters())
        problems = []
        for name in sorted(set(own) | set(state)):
            if name not in state:
                problems.append(f"{name}: missing from checkpoint")
            elif name not in own:
                problems.append(f"{name}: unexpected entry")
            elif own[name].shape != tuple(state[name].shape):
                problems.append(f"{name}: checkpoint {tuple(state[name].shape)} vs model {own[name].shape}")
        if problems:
            raise CheckpointError("incompatible checkpoint; " + "; ".join(problems))
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.data.dtype)
            p.grad = np.zeros_like(p.data)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def kaiming_uniform(rng, shape, gain=math.sqrt(2.0), dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Square-kernel convolution; padding defaults to 'same' for odd kernels.

    ``gain`` scales the Kaiming bound (sqrt(2) ahead of a ReLU, 1 otherwise).
    ``zero_init`` zeroes the weights, as used for offset generators.
    """

    def __init__(self, in_ch, out_ch, k=3, stride=1, padding=None, bias=True,
                 rng=None, gain=math.sqrt(2.0), zero_init=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_ch, in_ch, k, k)
        if zero_init:
            self.weight = Parameter(np.zeros(shape, dtype=np.float32))
        else:
            self.weight = Parameter(kaiming_uniform(rng, shape, gain))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        else:
            self.bias = None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self._cache = None

    @property
    def params(self):
        return ops.ConvParams(self.weight.data, None if self.bias is None else self.bias.data,
                              self.stride, self.padding)

    def forward(self, x):
        params = self.params
        out, cols = ops.conv2d(x, params, return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, grad_out):
        x, cols = self._cache
        self._cache = None
        gx, gw, gb = ops.conv2d_backward(x, self.params, grad_out, cols=cols)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad_out):
        return grad_out * self._mask


class Sigmoid(Module):
    def forward(self, x):
        self._y = ops.sigmoid(x)
        return self._y

    def backward(self, grad_out):
        return ops.sigmoid_backward(self._y, grad_out)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = ModuleList(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers._items):
            grad = layer.backward(grad)
        return grad


class ResidualBlock(Module):
    """relu(conv3x3(relu(conv3x3(x))) + shortcut(x)); 1x1 projection if channels change."""

    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng=rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng, gain=1.0)
        self.proj = Conv2d(in_ch, out_ch, 1, rng=rng, gain=1.0) if in_ch != out_ch else None
        self.relu_out = ReLU()

    def forward(self, x):
        y = self.conv2(self.relu1(self.conv1(x)))
        skip = self.proj(x) if self.proj is not None else x
        return self.relu_out(y + skip)

    def backward(self, grad):
        g = self.relu_out.backward(grad)
        gx = self.conv1.backward(self.relu1.backward(self.conv2.backward(g)))
        if self.proj is not None:
            gx = gx + self.proj.backward(g)
        else:
            gx = gx + g
        return gx

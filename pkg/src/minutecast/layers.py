"""Network layers: linear, temporal convolution, max pooling, layer norm,
dropout, and the ELU/GeLU activations, each with a hand-derived backward pass.

Sequences are channels-last: ``[..., length, channels]``. Convolution and
pooling pad so that conv preserves length and pooling halves it (ceil) for
any positive length, which is what lets the encoder's distilling stage
control the length schedule on its own.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, from_op, glorot_uniform, matmul
from .errors import ConfigError, ContractError, DimensionError


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            self._collect(name, val, out)
        return out

    def _collect(self, prefix, val, out):
        if isinstance(val, Tensor):
            if val.requires_grad:
                out[prefix] = val
        elif isinstance(val, Module):
            for sub, p in val.named_parameters().items():
                out[f"{prefix}.{sub}"] = p
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                self._collect(f"{prefix}.{i}", item, out)

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Position-wise affine map ``x @ W + b`` over the last dimension."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias=True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(
            glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear expects width {self.in_dim}, got input shape {x.shape}"
            )
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    """Same-padded temporal convolution, kernel 3 by default.

    Weight layout is ``[kernel, in_channels, out_channels]`` so the forward
    pass is one einsum over sliding windows.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel=3):
        if kernel % 2 != 1:
            raise ConfigError(f"conv kernel must be odd for same padding, got {kernel}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        fan = kernel * in_ch
        self.weight = Tensor(
            glorot_uniform(rng, (kernel, in_ch, out_ch), fan, out_ch),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_ch:
            raise DimensionError(
                f"conv expects {self.in_ch} channels, got input shape {x.shape}"
            )
        length = x.shape[-2]
        if length == 0:
            raise ContractError("conv1d on an empty sequence")
        k, pad = self.kernel, self.kernel // 2
        w, b = self.weight, self.bias

        pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
        padded = np.pad(x.data, pad_spec)
        windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-2)
        data = np.einsum("...lck,kco->...lo", windows, w.data) + b.data

        def backward(g):
            gw = np.einsum(
                "xck,xo->kco",
                windows.reshape(-1, self.in_ch, k),
                g.reshape(-1, self.out_ch),
            )
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            gx_padded = np.zeros_like(padded)
            for j in range(k):
                gx_padded[..., j : j + length, :] += np.matmul(
                    g, w.data[j].swapaxes(-1, -2)
                )
            return gx_padded[..., pad : pad + length, :], gw, gb

        return from_op(data, (x, w, b), backward)


def maxpool1d(x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    """Max pooling over time with symmetric -inf padding of ``window // 2``.

    Output length is ``floor((L + 2*(window//2) - window) / stride) + 1``;
    with the default window 3 / stride 2 that is ``ceil(L / 2)`` for every
    L >= 1.
    """
    length = x.shape[-2]
    if length == 0:
        raise ContractError("maxpool1d on an empty sequence")
    pad = window // 2
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(x.data, pad_spec, constant_values=-np.inf)
    views = np.lib.stride_tricks.sliding_window_view(padded, window, axis=-2)
    views = views[..., ::stride, :, :]
    data = views.max(axis=-1)
    arg = views.argmax(axis=-1)
    n_out = data.shape[-2]
    starts = stride * np.arange(n_out)

    def backward(g):
        gx_padded = np.zeros_like(padded)
        for j in range(window):
            gx_padded[..., starts + j, :] += g * (arg == j)
        return (gx_padded[..., pad : pad + length, :],)

    return from_op(data, (x,), backward)


class LayerNorm(Module):
    """Normalize the last dimension to zero mean / unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        if eps <= 0:
            raise ConfigError("layer norm epsilon must be positive")
        self.dim = dim
        self.eps = eps
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(
                f"layer norm expects width {self.dim}, got input shape {x.shape}"
            )
        gamma, beta = self.weight, self.bias
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        sigma = np.sqrt(centered.var(axis=-1, keepdims=True) + self.eps)
        norm = centered / sigma
        data = norm * gamma.data + beta.data

        def backward(g):
            gy = g * gamma.data
            gx = (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - norm * (gy * norm).mean(axis=-1, keepdims=True)
            ) / sigma
            axes = tuple(range(g.ndim - 1))
            return gx, (g * norm).sum(axis=axes), g.sum(axis=axes)

        return from_op(data, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit generator")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return from_op(x.data * mask, (x,), lambda g: (g * mask,))


def elu(x: Tensor) -> Tensor:
    pos = x.data >= 0
    data = np.where(pos, x.data, np.expm1(x.data))
    return from_op(data, (x,), lambda g: (g * np.where(pos, 1.0, data + 1.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GeLU."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return from_op(data, (x,), backward)


ACTIVATIONS = {"elu": elu, "gelu": gelu}


def get_activation(kind: str):
    try:
        return ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None

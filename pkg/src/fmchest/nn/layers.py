"""Layers with hand-written backward passes.

Feature maps are NHWC ``(batch, height, width, channels)`` float64 arrays.
Every layer caches what its backward pass needs during ``forward``;
``backward`` accumulates parameter gradients into ``grads`` and returns the
gradient with respect to the layer input.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import DimensionError, InvalidParameterError, ModelStateError


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, g in self.grads.items():
            yield prefix + name, g
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, g in self.named_grads():
            g.fill(0.0)

    def _take_cache(self):
        if self._cache is None:
            raise ModelStateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


_CONV_BLOCK_ROWS = 256


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.add_param("weight", np.zeros((d_in, d_out)))
            self.add_param("bias", np.zeros(d_out))
        else:
            self.add_param("weight", _uniform(rng, (d_in, d_out), d_in))
            self.add_param("bias", _uniform(rng, d_out, d_in))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        d_in = x.shape[-1]
        self.grads["weight"] += x.reshape(-1, d_in).T @ dy.reshape(-1, dy.shape[-1])
        self.grads["bias"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.params["weight"].T


class Conv2d(Module):
    """Square-kernel convolution, zero padding ``kernel // 2``.

    Weight layout is ``(k, k, c_in, c_out)`` to match the im2col column order,
    which keeps each kernel tap's channels contiguous.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 1,
        zero_init: bool = False,
    ):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.pad = kernel // 2
        fan_in = c_in * kernel * kernel
        shape = (kernel, kernel, c_in, c_out)
        if zero_init:
            self.add_param("weight", np.zeros(shape))
            self.add_param("bias", np.zeros(c_out))
        else:
            self.add_param("weight", _uniform(rng, shape, fan_in))
            self.add_param("bias", _uniform(rng, c_out, fan_in))

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def _cols(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        k, s = self.kernel, self.stride
        taps = [xp[:, i : i + s * ho : s, j : j + s * wo : s, :] for i in range(k) for j in range(k)]
        return np.concatenate(taps, axis=-1).reshape(-1, k * k * self.c_in)

    def _chunk(self, ho: int, wo: int) -> int:
        # samples per im2col block; small blocks keep the columns in cache
        return max(1, _CONV_BLOCK_ROWS // (ho * wo))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise DimensionError(f"conv expects (B,H,W,{self.c_in}), got {x.shape}")
        b, h, w, _ = x.shape
        p = self.pad
        ho, wo = self._out_hw(h, w)
        w2 = self.params["weight"].reshape(-1, self.c_out)
        if self.kernel == 1 and self.stride == 1:
            self._cache = (x, x.shape)
            return (x.reshape(-1, self.c_in) @ w2 + self.params["bias"]).reshape(b, h, w, self.c_out)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        y = np.empty((b, ho, wo, self.c_out))
        step = self._chunk(ho, wo)
        for i in range(0, b, step):
            y[i : i + step] = (self._cols(xp[i : i + step], ho, wo) @ w2).reshape(-1, ho, wo, self.c_out)
        y += self.params["bias"]
        self._cache = (xp, x.shape)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xin, (b, h, w, c) = self._take_cache()
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = dy.shape[1:3]
        w2 = self.params["weight"].reshape(-1, self.c_out)
        gw = self.grads["weight"].reshape(-1, self.c_out)
        self.grads["bias"] += dy.sum(axis=(0, 1, 2))
        if k == 1 and s == 1:
            dyf = dy.reshape(-1, self.c_out)
            gw += xin.reshape(-1, c).T @ dyf
            return (dyf @ w2.T).reshape(b, h, w, c)
        dxp = np.zeros_like(xin)
        step = self._chunk(ho, wo)
        for i0 in range(0, b, step):
            dyc = dy[i0 : i0 + step].reshape(-1, self.c_out)
            gw += self._cols(xin[i0 : i0 + step], ho, wo).T @ dyc
            dcols = (dyc @ w2.T).reshape(-1, ho, wo, k * k, c)
            d = dxp[i0 : i0 + step]
            for i in range(k):
                for j in range(k):
                    d[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i * k + j]
        return dxp[:, p : p + h, p : p + w, :]


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.channels, self.eps = channels, eps
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))

    def _group_mean(self, v: np.ndarray) -> np.ndarray:
        """Mean of ``(B, HW, C)`` over space and each channel group, broadcast back to ``(B, 1, C)``."""
        b, n, c = v.shape
        g = self.groups
        per_group = v.sum(axis=1).reshape(b, g, c // g).mean(axis=2) / n
        return np.repeat(per_group, c // g, axis=1)[:, None, :]

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        xf = x.reshape(b, h * w, c)
        xc = xf - self._group_mean(xf)
        inv_std = 1.0 / np.sqrt(self._group_mean(xc * xc) + self.eps)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std)
        return (xhat * self.params["gamma"] + self.params["beta"]).reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._take_cache()
        b, h, w, c = dy.shape
        dyf = dy.reshape(b, h * w, c)
        self.grads["gamma"] += (dyf * xhat).sum(axis=(0, 1))
        self.grads["beta"] += dyf.sum(axis=(0, 1))
        dxhat = dyf * self.params["gamma"]
        dx = inv_std * (dxhat - self._group_mean(dxhat) - xhat * self._group_mean(dxhat * xhat))
        return dx.reshape(dy.shape)


class SiLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = (x, sig)
        return x * sig

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, sig = self._take_cache()
        return dy * (sig * (1.0 + x * (1.0 - sig)))


class Identity(Module):
    def forward(self, x):
        self._cache = True
        return x

    def backward(self, dy):
        self._take_cache()
        return dy


class Upsample(Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(c_in, c_out, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = True
        return self.conv.forward(x.repeat(2, axis=1).repeat(2, axis=2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._take_cache()
        d = self.conv.backward(dy)
        b, h2, w2, c = d.shape
        return d.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


def sinusoidal_embedding(t, dim: int, scale: float = 1000.0, max_period: float = 10000.0) -> np.ndarray:
    """Sines in the first half, cosines in the second, geometric frequencies.

    ``t`` is a scalar or a 1-D batch of times in ``[0, 1]``; it is multiplied by
    ``scale`` before encoding.
    """
    if dim < 2 or dim % 2:
        raise InvalidParameterError(f"embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = scale * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(Module):
    """GN-SiLU-conv, add projected time embedding, GN-SiLU-conv, plus skip."""

    def __init__(self, c_in: int, c_out: int, t_dim: int, rng: np.random.Generator, groups: int = 8):
        super().__init__()
        self.norm1 = self.add_child("norm1", GroupNorm(c_in, groups))
        self.act1 = self.add_child("act1", SiLU())
        self.conv1 = self.add_child("conv1", Conv2d(c_in, c_out, rng))
        self.t_act = self.add_child("t_act", SiLU())
        self.t_proj = self.add_child("t_proj", Linear(t_dim, c_out, rng))
        self.norm2 = self.add_child("norm2", GroupNorm(c_out, groups))
        self.act2 = self.add_child("act2", SiLU())
        self.conv2 = self.add_child("conv2", Conv2d(c_out, c_out, rng))
        if c_in != c_out:
            self.skip = self.add_child("skip", Conv2d(c_in, c_out, rng, kernel=1))
        else:
            self.skip = Identity()

    def forward(self, x: np.ndarray, temb: np.ndarray) -> np.ndarray:
        h = self.conv1.forward(self.act1.forward(self.norm1.forward(x)))
        h = h + self.t_proj.forward(self.t_act.forward(temb))[:, None, None, :]
        h = self.conv2.forward(self.act2.forward(self.norm2.forward(h)))
        self._cache = True
        return self.skip.forward(x) + h

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(dx, dtemb)``."""
        self._take_cache()
        dx = self.skip.backward(dy)
        dh = self.norm2.backward(self.act2.backward(self.conv2.backward(dy)))
        dtemb = self.t_act.backward(self.t_proj.backward(dh.sum(axis=(1, 2))))
        dx = dx + self.norm1.backward(self.act1.backward(self.conv1.backward(dh)))
        return dx, dtemb


class AttentionBlock(Module):
    """Single-head self-attention over spatial positions with a residual path."""

    def __init__(self, channels: int, rng: np.random.Generator, groups: int = 8):
        super().__init__()
        self.c = channels
        self.norm = self.add_child("norm", GroupNorm(channels, groups))
        self.qkv = self.add_child("qkv", Linear(channels, 3 * channels, rng))
        self.proj = self.add_child("proj", Linear(channels, channels, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        hn = self.norm.forward(x).reshape(b, h * w, c)
        qkv = self.qkv.forward(hn)
        q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(c)
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        o = a @ v
        self._cache = (q, k, v, a, x.shape)
        return x + self.proj.forward(o).reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, a, shape = self._take_cache()
        b, h, w, c = shape
        do = self.proj.backward(dy.reshape(b, h * w, c))
        da = do @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(c)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dhn = self.qkv.backward(np.concatenate([dq, dk, dv], axis=-1))
        return dy + self.norm.backward(dhn.reshape(shape))

"""Parameter containers and layers built on :mod:`rqdia.tensor.core`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core as T
from .core import Tensor


def orthogonal(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def param(data, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter registry; attribute insertion order fixes naming order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            src = np.asarray(state[k])
            if src.shape != p.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {p.shape}")
            p.data = src.astype(p.dtype, copy=True)

    def copy_from(self, other: "Module") -> None:
        self.load_state_dict(other.state_dict())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _w(p: Tensor, frozen: bool) -> Tensor:
    return Tensor(p.data) if frozen else p


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32, gain: float = 1.0):
        self.weight = param(orthogonal(out_features, in_features, rng, gain).T, dtype)
        self.bias = param(np.zeros(out_features), dtype)

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.matmul(x, _w(self.weight, frozen)) + _w(self.bias, frozen)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32, gain: float = math.sqrt(2.0)):
        w = orthogonal(out_channels, in_channels * kernel * kernel, rng, gain)
        self.weight = param(w.reshape(out_channels, in_channels, kernel, kernel), dtype)
        self.bias = param(np.zeros(out_channels), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.conv2d(x, _w(self.weight, frozen), _w(self.bias, frozen), self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param(np.ones(dim), dtype)
        self.beta = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.layer_norm(x, _w(self.gamma, frozen), _w(self.beta, frozen), self.eps)


def _scale_noise(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.sqrt(np.abs(x))


class NoisyLinear(Module):
    """Linear layer with learned factorised Gaussian weight noise.

    Noise is held fixed between calls to :meth:`sample_noise`; after
    :meth:`zero_noise` the layer is exactly the mean linear map.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 sigma0: float = 0.1, dtype=np.float32):
        bound = 1.0 / math.sqrt(in_features)
        self.mu_w = param(rng.uniform(-bound, bound, (in_features, out_features)), dtype)
        self.sigma_w = param(np.full((in_features, out_features), sigma0 * bound), dtype)
        self.mu_b = param(rng.uniform(-bound, bound, out_features), dtype)
        self.sigma_b = param(np.full(out_features, sigma0 * bound), dtype)
        self.eps_in = np.zeros(in_features, dtype=dtype)
        self.eps_out = np.zeros(out_features, dtype=dtype)

    def sample_noise(self, rng: np.random.Generator) -> None:
        dt = self.mu_w.dtype
        self.eps_in = _scale_noise(rng.standard_normal(self.eps_in.shape)).astype(dt)
        self.eps_out = _scale_noise(rng.standard_normal(self.eps_out.shape)).astype(dt)

    def zero_noise(self) -> None:
        self.eps_in = np.zeros_like(self.eps_in)
        self.eps_out = np.zeros_like(self.eps_out)

    @property
    def noisy(self) -> bool:
        return bool(self.eps_out.any() or self.eps_in.any())

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        mu_w, mu_b = _w(self.mu_w, frozen), _w(self.mu_b, frozen)
        if not self.noisy:
            return T.matmul(x, mu_w) + mu_b
        w = mu_w + _w(self.sigma_w, frozen) * np.outer(self.eps_in, self.eps_out)
        b = mu_b + _w(self.sigma_b, frozen) * self.eps_out
        return T.matmul(x, w) + b


def noisy_linear_forward(x: Tensor, layer: NoisyLinear, rng: np.random.Generator | None) -> Tensor:
    """Draw fresh noise from ``rng`` (training) or use none (``rng=None``, evaluation)."""
    if rng is None:
        layer.zero_noise()
    else:
        layer.sample_noise(rng)
    return layer(x)


def noisy_output_variance(x: np.ndarray, layer: NoisyLinear) -> np.ndarray:
    """Closed-form per-unit output variance of a factorised noisy layer on input ``x``.

    With f(e) = sign(e)sqrt|e| and e ~ N(0,1), E[f(e)] = 0 and E[f(e)^2] = sqrt(2/pi).
    """
    c = math.sqrt(2.0 / math.pi)
    sw, sb = layer.sigma_w.data.astype(np.float64), layer.sigma_b.data.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    return c * (c * (x ** 2) @ (sw ** 2) + sb ** 2)

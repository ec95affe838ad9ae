from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def global_grad_norm(params: list[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))


def adam_step(params: list[Tensor], state: AdamState) -> float:
    """One Adam update with bias correction; returns the pre-clip gradient norm.

    Gradients are zeroed (set to ``None``) afterwards.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"adam_step: state holds {len(state.m)} moments for {len(params)} params")
    norm = global_grad_norm(params)
    scale = 1.0
    if state.max_grad_norm is not None and norm > state.max_grad_norm:
        scale = state.max_grad_norm / norm
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if scale == 1.0 else p.grad * np.asarray(scale, dtype=p.dtype)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.data = p.data - step
        p.grad = None
    return norm


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               max_grad_norm=max_grad_norm)

    def step(self) -> float:
        return adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.state.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.state.step_count = int(arrays[f"{prefix}.step"][0])
        m, v = [], []
        for i, p in enumerate(self.params):
            if f"{prefix}.m.{i}" not in arrays:
                break
            m.append(np.array(arrays[f"{prefix}.m.{i}"], dtype=p.dtype))
            v.append(np.array(arrays[f"{prefix}.v.{i}"], dtype=p.dtype))
        if m and len(m) != len(self.params):
            raise ValueError(f"{prefix}: optimizer state covers {len(m)} of {len(self.params)} params")
        self.state.m, self.state.v = m, v

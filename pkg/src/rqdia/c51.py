"""Categorical (C51) Q-learning over pixel stacks with Rainbow-style extras.

Double-Q bootstrap selection, n-step targets from the replay folder,
prioritised replay, factorised noisy layers and a dueling head. rQdia comes
in two flavours: squared error between the anchor and augmented logits, or
KL from the anchor distribution to the augmented one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment
from .tensor import Adam, Module, Tape, Tensor
from .tensor import core as T
from .tensor.nn import Conv2d, Linear, NoisyLinear

RQDIA_MODES = ("off", "mse", "kl")


@dataclass
class C51Config:
    atoms: int = 51
    v_min: float = -10.0
    v_max: float = 10.0
    n_step: int = 20
    gamma: float = 0.99
    batch_size: int = 32
    target_update_period: int = 2000
    noisy: bool = True
    noisy_sigma0: float = 0.1
    dueling: bool = True
    rqdia_mode: str = "off"
    rqdia_weight: float = 1.0
    lr: float = 1e-4
    adam_eps: float = 1.5e-5
    max_grad_norm: float = 10.0
    channels: tuple[int, ...] = (32, 64)
    kernels: tuple[int, ...] = (5, 5)
    strides: tuple[int, ...] = (5, 5)
    hidden_dim: int = 256
    # epsilon-greedy, used only when noisy layers are off
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_steps: int = 10_000

    def __post_init__(self):
        if self.atoms < 2:
            raise ValueError(f"atoms must be >= 2, got {self.atoms}")
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min {self.v_min} must be below v_max {self.v_max}")
        if self.rqdia_mode not in RQDIA_MODES:
            raise ValueError(f"unknown rqdia_mode {self.rqdia_mode!r}; expected one of {RQDIA_MODES}")
        self.channels = tuple(int(c) for c in self.channels)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.strides = tuple(int(s) for s in self.strides)
        if not len(self.channels) == len(self.kernels) == len(self.strides):
            raise ValueError("channels, kernels and strides must have equal length")
        if self.n_step < 1 or self.batch_size < 1 or self.target_update_period < 1:
            raise ValueError("n_step, batch_size and target_update_period must be >= 1")

    @property
    def support(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.atoms)

    def epsilon(self, step: int) -> float:
        if self.noisy:
            return 0.0
        frac = min(max(step / max(self.eps_decay_steps, 1), 0.0), 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class DistNet(Module):
    """Conv encoder and (optionally dueling, optionally noisy) distributional head."""

    def __init__(self, obs_shape, n_actions: int, cfg: C51Config, rng, dtype=np.float32):
        c, h, _ = obs_shape
        self.convs = []
        size = h
        for cin, cout, k, s in zip((c, *cfg.channels[:-1]), cfg.channels, cfg.kernels, cfg.strides):
            self.convs.append(Conv2d(cin, cout, k, rng, stride=s, dtype=dtype))
            size = T.conv_output_size(size, k, s, 0)
            if size < 1:
                raise ValueError(f"conv stack collapses a {h}px input")
        feat = cfg.channels[-1] * size * size
        self.n_actions, self.atoms, self.dueling = n_actions, cfg.atoms, cfg.dueling

        def layer(i, o):
            if cfg.noisy:
                return NoisyLinear(i, o, rng, cfg.noisy_sigma0, dtype)
            return Linear(i, o, rng, dtype)

        self.fc_h_a = layer(feat, cfg.hidden_dim)
        self.fc_z_a = layer(cfg.hidden_dim, n_actions * cfg.atoms)
        if cfg.dueling:
            self.fc_h_v = layer(feat, cfg.hidden_dim)
            self.fc_z_v = layer(cfg.hidden_dim, cfg.atoms)

    def noisy_layers(self) -> list[NoisyLinear]:
        return [m for m in self.modules() if isinstance(m, NoisyLinear)]

    def sample_noise(self, rng: np.random.Generator) -> None:
        for m in self.noisy_layers():
            m.sample_noise(rng)

    def zero_noise(self) -> None:
        for m in self.noisy_layers():
            m.zero_noise()

    def __call__(self, x: Tensor) -> Tensor:
        """Logits shaped ``(B, actions, atoms)``."""
        h = x
        for conv in self.convs:
            h = T.relu(conv(h))
        b = h.shape[0]
        h = T.reshape(h, (b, -1))
        adv = T.reshape(self.fc_z_a(T.relu(self.fc_h_a(h))), (b, self.n_actions, self.atoms))
        if not self.dueling:
            return adv
        val = T.reshape(self.fc_z_v(T.relu(self.fc_h_v(h))), (b, 1, self.atoms))
        return val + adv - T.mean(adv, axis=1, keepdims=True)


def q_from_logits(logits: np.ndarray, support: np.ndarray) -> np.ndarray:
    """``Q(s, a) = sum_j softmax(logits)_{a,j} z_j``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ support.astype(p.dtype)


def q_values(net: DistNet, obs, support: np.ndarray) -> np.ndarray:
    return q_from_logits(net(T.as_tensor(obs)).data, support)


def categorical_projection(probs, rewards, gamma_n, dones, support) -> np.ndarray:
    """Project ``r + gamma_n (1 - d) z`` onto the fixed support by linear mass splitting.

    ``probs`` is ``(B, N)``; returns ``(B, N)`` rows that each sum to one.
    """
    probs = np.asarray(probs)
    support = np.asarray(support, dtype=probs.dtype)
    b, n = probs.shape
    vmin, vmax = support[0], support[-1]
    dz = (vmax - vmin) / (n - 1)
    rewards = np.asarray(rewards, dtype=probs.dtype).reshape(b, 1)
    keep = (1.0 - np.asarray(dones, dtype=probs.dtype).reshape(b, 1)) * \
        np.broadcast_to(np.asarray(gamma_n, dtype=probs.dtype), (b,)).reshape(b, 1)
    tz = np.clip(rewards + keep * support[None, :], vmin, vmax)
    pos = (tz - vmin) / dz
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    hi = np.clip(np.ceil(pos).astype(np.int64), 0, n - 1)
    w_hi = pos - lo
    # an exact hit (lo == hi) puts all the mass on that atom
    w_lo = np.where(lo == hi, 1.0, hi - pos)
    w_hi = np.where(lo == hi, 0.0, w_hi)
    out = np.zeros_like(probs)
    rows = np.repeat(np.arange(b), n).reshape(b, n)
    np.add.at(out, (rows, lo), probs * w_lo)
    np.add.at(out, (rows, hi), probs * w_hi)
    return out


def _pick(x: Tensor, actions) -> Tensor:
    """Rows ``x[b, actions[b], :]`` of a ``(B, A, N)`` tensor."""
    b, _, n = x.shape
    idx = np.broadcast_to(np.asarray(actions, dtype=np.intp).reshape(b, 1, 1), (b, 1, n))
    return T.reshape(T.gather(x, idx, axis=1), (b, n))


def target_distribution(agent: "C51Agent", batch) -> tuple[np.ndarray, np.ndarray]:
    """Projected target rows and the double-Q bootstrap actions (online argmax)."""
    dt = agent.dtype
    next_obs = Tensor(np.asarray(batch.next_states, dtype=dt))
    support = agent.support
    a_star = np.argmax(q_from_logits(agent.online(next_obs).data, support), axis=1)
    t_logits = agent.target(next_obs).data
    t_probs = np.exp(T._log_softmax_np(t_logits, -1))
    rows = t_probs[np.arange(len(a_star)), a_star]
    gamma_n = agent.cfg.gamma ** np.asarray(batch.steps, dtype=np.float64)
    return categorical_projection(rows, batch.rewards, gamma_n, batch.dones, support), a_star


def c51_loss(agent: "C51Agent", batch, m: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, Tensor]:
    """Weighted mean cross-entropy to the projected target.

    Returns (loss, per-element cross-entropy, online logits at the states).
    """
    if m is None:
        m, _ = target_distribution(agent, batch)
    logits = agent.online(Tensor(np.asarray(batch.states, dtype=agent.dtype)))
    logp = _pick(T.log_softmax(logits, axis=2), batch.actions)
    ce = T.neg(T.sum(logp * m.astype(agent.dtype), axis=1))
    w = np.asarray(batch.weights, dtype=agent.dtype)
    return T.mean(ce * w), ce.data.copy(), logits


def logit_mse(anchor: Tensor, other: Tensor) -> Tensor:
    return T.mean(T.square(anchor - other))


def logit_kl(anchor, other: Tensor) -> Tensor:
    """Mean row-wise ``KL(softmax(anchor) || softmax(other))`` over the last axis."""
    return T.mean(T.kl_from_logits(anchor, other, axis=-1))


def rqdia_discrete_mse(agent: "C51Agent", obs, aug_spec, anchor_logits: Tensor | None = None) -> Tensor:
    """Mean over batch, actions and atoms of ``(logits(s) - logits(aug(s)))^2``."""
    obs = np.asarray(T.as_tensor(obs).data)
    if anchor_logits is None:
        anchor_logits = agent.online(Tensor(obs))
    aug_logits = agent.online(Tensor(augment.apply(obs, aug_spec)))
    return logit_mse(anchor_logits, aug_logits)


def rqdia_discrete_kl(agent: "C51Agent", obs, aug_spec, anchor_logits: Tensor | None = None) -> Tensor:
    """Mean over batch and actions of ``KL(P(s, a) || P(aug(s), a))``; the anchor side is a constant."""
    obs = np.asarray(T.as_tensor(obs).data)
    anchor = agent.online(Tensor(obs)).data if anchor_logits is None else anchor_logits.data
    aug_logits = agent.online(Tensor(augment.apply(obs, aug_spec)))
    return logit_kl(anchor, aug_logits)


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(q, axis=-1)


class C51Agent:
    def __init__(self, cfg: C51Config, obs_shape, n_actions: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.n_actions = n_actions
        self.support = cfg.support.astype(self.dtype)
        self.online = DistNet(obs_shape, n_actions, cfg, rng, dtype)
        self.target = DistNet(obs_shape, n_actions, cfg, rng, dtype)
        self.target.copy_from(self.online)
        self.opt = Adam(self.online.parameters(), lr=cfg.lr, eps=cfg.adam_eps, max_grad_norm=cfg.max_grad_norm)
        self.updates = 0

    def modules(self) -> dict[str, Module]:
        return {"online": self.online, "target": self.target}

    def optimizers(self) -> dict[str, Adam]:
        return {"opt": self.opt}

    def act(self, obs: np.ndarray, mode: str, rng: np.random.Generator | None = None,
            epsilon: float = 0.0) -> int:
        """Greedy action; train mode draws fresh layer noise (or explores epsilon-greedily)."""
        x = np.asarray(obs)
        x = (x.astype(self.dtype) / 255.0) if x.dtype == np.uint8 else x.astype(self.dtype)
        if mode == "eval":
            self.online.zero_noise()
        elif mode == "train":
            if self.cfg.noisy:
                self.online.sample_noise(rng)
            elif epsilon > 0 and rng.random() < epsilon:
                return int(rng.integers(0, self.n_actions))
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return int(greedy(q_values(self.online, x[None], self.support))[0])

    def learn(self, batch, aug_spec, rng: np.random.Generator) -> tuple[dict, np.ndarray]:
        """One optimiser step on ``batch``; returns metrics and per-element cross-entropy."""
        cfg = self.cfg
        if cfg.noisy:
            # one noise draw per update, shared by every forward pass in it
            self.online.sample_noise(rng)
            self.target.sample_noise(rng)
        m, _ = target_distribution(self, batch)
        with Tape() as tape:
            loss, ce, logits = c51_loss(self, batch, m)
            total, rq = loss, None
            if cfg.rqdia_mode == "mse":
                rq = rqdia_discrete_mse(self, batch.states.astype(self.dtype), aug_spec, logits)
            elif cfg.rqdia_mode == "kl":
                rq = rqdia_discrete_kl(self, batch.states.astype(self.dtype), aug_spec, logits)
            if rq is not None:
                total = loss + cfg.rqdia_weight * rq
        tape.backward(total, self.opt.params)
        grad_norm = self.opt.step()
        self.updates += 1
        if self.updates % cfg.target_update_period == 0:
            self.target.copy_from(self.online)
        q = q_from_logits(logits.data, self.support)
        metrics = {"c51_loss": loss.item(), "rqdia_loss": 0.0 if rq is None else rq.item(),
                   "mean_q": float(np.mean(q[np.arange(len(q)), batch.actions])), "grad_norm": grad_norm}
        return metrics, ce

    def train_step(self, replay, aug_spec, rng: np.random.Generator, replay_rng: np.random.Generator,
                   beta: float) -> dict:
        """Prioritised sample, update, then write the cross-entropies back as priorities."""
        batch, idx, _ = replay.sample_prioritized(self.cfg.batch_size, replay_rng, beta)
        metrics, ce = self.learn(batch, aug_spec, rng)
        replay.update_priorities(idx, ce, batch.serials)
        return metrics


def train_step(agent: C51Agent, replay, aug_spec, rng, replay_rng, beta: float) -> dict:
    return agent.train_step(replay, aug_spec, rng, replay_rng, beta)

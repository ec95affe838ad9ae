"""Soft actor-critic from pixels with optional Q-averaging or rQdia regularisation.

Layout: a conv trunk shared by actor and critic, a critic projection
(linear + layer norm + tanh) feeding two Q heads, and an actor with its own
projection over the same conv features. The actor sees the conv output as a
constant, so only critic losses train the convolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import augment
from .tensor import Adam, Module, Tape, Tensor
from .tensor import core as T
from .tensor.nn import Conv2d, LayerNorm, Linear, param

REGULARIZERS = ("none", "drq_avg", "rqdia")
LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@dataclass
class SacConfig:
    gamma: float = 0.99
    critic_tau: float = 0.01
    encoder_tau: float = 0.05
    critic_target_update_freq: int = 2
    lr: float = 1e-3
    alpha_lr: float = 1e-4
    batch_size: int = 128
    regularizer: str = "none"
    rqdia_weight: float = 1.0
    rqdia_action_subset: int | None = None
    init_temperature: float = 0.1
    num_filters: int = 32
    conv_strides: tuple[int, ...] = (2, 1, 1, 1)
    latent_dim: int = 50
    hidden_dim: int = 1024
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; expected one of {REGULARIZERS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (rQdia pairs states with other batch actions)")
        for name in ("lr", "alpha_lr", "critic_tau", "encoder_tau", "init_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.critic_target_update_freq < 1:
            raise ValueError("critic_target_update_freq must be >= 1")
        if self.rqdia_action_subset is not None and not 1 <= self.rqdia_action_subset <= self.batch_size:
            raise ValueError(f"rqdia_action_subset must lie in [1, batch_size], got {self.rqdia_action_subset}")
        self.conv_strides = tuple(int(s) for s in self.conv_strides)


# ---------------------------------------------------------------- networks


class ConvTrunk(Module):
    """3x3 ReLU convolutions; output flattened to ``(B, out_dim)``."""

    def __init__(self, obs_shape, num_filters, strides, rng, dtype=np.float32):
        c, h, _ = obs_shape
        self.convs = []
        size = h
        for i, s in enumerate(strides):
            self.convs.append(Conv2d(c if i == 0 else num_filters, num_filters, 3, rng, stride=s, dtype=dtype))
            size = T.conv_output_size(size, 3, s, 0)
            if size < 1:
                raise ValueError(f"conv stack with strides {tuple(strides)} collapses a {h}px input")
        self.out_dim = num_filters * size * size

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        h = x
        for conv in self.convs:
            h = T.relu(conv(h, frozen))
        return T.reshape(h, (h.shape[0], -1))


class Projection(Module):
    def __init__(self, in_dim, latent_dim, rng, dtype=np.float32):
        self.fc = Linear(in_dim, latent_dim, rng, dtype)
        self.ln = LayerNorm(latent_dim, dtype)

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return T.tanh(self.ln(self.fc(x, frozen), frozen))


class MLP(Module):
    def __init__(self, in_dim, hidden, out_dim, rng, dtype=np.float32):
        self.layers = [Linear(in_dim, hidden, rng, dtype), Linear(hidden, hidden, rng, dtype),
                       Linear(hidden, out_dim, rng, dtype)]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        h = T.relu(self.layers[0](x, frozen))
        h = T.relu(self.layers[1](h, frozen))
        return self.layers[2](h, frozen)


class Critic(Module):
    """Projection plus twin Q heads over ``concat(latent, action)``."""

    def __init__(self, feat_dim, action_dim, cfg: SacConfig, rng, dtype=np.float32):
        self.proj = Projection(feat_dim, cfg.latent_dim, rng, dtype)
        self.q1 = MLP(cfg.latent_dim + action_dim, cfg.hidden_dim, 1, rng, dtype)
        self.q2 = MLP(cfg.latent_dim + action_dim, cfg.hidden_dim, 1, rng, dtype)

    def heads(self, latent: Tensor, action, frozen: bool = False) -> tuple[Tensor, Tensor]:
        x = T.concat([latent, T.as_tensor(action, latent)], axis=1)
        n = latent.shape[0]
        return T.reshape(self.q1(x, frozen), (n,)), T.reshape(self.q2(x, frozen), (n,))


class Actor(Module):
    def __init__(self, feat_dim, action_dim, cfg: SacConfig, rng, dtype=np.float32):
        self.proj = Projection(feat_dim, cfg.latent_dim, rng, dtype)
        self.mlp = MLP(cfg.latent_dim, cfg.hidden_dim, 2 * action_dim, rng, dtype)
        self.action_dim = action_dim
        self.log_std_min = cfg.log_std_min
        self.log_std_max = cfg.log_std_max

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        out = self.mlp(self.proj(features))
        d = self.action_dim
        mu = T.take(out, np.arange(d), axis=1)
        log_std = clamp(T.take(out, np.arange(d, 2 * d), axis=1), self.log_std_min, self.log_std_max)
        return mu, log_std


class Temperature(Module):
    def __init__(self, init_temperature: float, action_dim: int, dtype=np.float32):
        self.log_alpha = param(np.array([math.log(init_temperature)]), dtype)
        self.target_entropy = -float(action_dim)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero outside the interval."""
    upper = T.minimum(x, Tensor(np.full(x.shape, hi, dtype=x.dtype)))
    return T.neg(T.minimum(T.neg(upper), Tensor(np.full(x.shape, -lo, dtype=x.dtype))))


# ---------------------------------------------------------------- policy


def squashed_log_prob(mu: Tensor, log_std: Tensor, z: np.ndarray) -> tuple[Tensor, Tensor]:
    """Action ``tanh(mu + exp(log_std) z)`` and its log density, summed over action dims.

    log(1 - tanh(u)^2) is written as 2 (log 2 - u - softplus(-2u)) to stay finite
    when |u| is large.
    """
    z = np.asarray(z, dtype=mu.dtype)
    u = mu + T.exp(log_std) * z
    gauss = T.sum((-0.5 * z * z - 0.5 * LOG_2PI) - log_std, axis=1)
    correction = T.sum(2.0 * (LOG_2 - u - T.softplus(-2.0 * u)), axis=1)
    return T.tanh(u), gauss - correction


def log_prob_of_action(mu, log_std, action) -> np.ndarray:
    """Density of a given squashed action in (-1, 1), via the same code path as sampling."""
    mu, log_std = T.as_tensor(mu), T.as_tensor(log_std)
    u = np.arctanh(np.asarray(action, dtype=np.float64))
    z = (u - mu.data) / np.exp(log_std.data)
    return squashed_log_prob(mu, log_std, z)[1].data


def sample_action(actor: Actor, features: Tensor, mode: str, rng: np.random.Generator | None = None):
    """train: reparameterised tanh-Gaussian sample and log prob; eval: ``tanh(mu)`` and ``None``."""
    mu, log_std = actor(features)
    if mode == "eval":
        return T.tanh(mu), None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    z = rng.standard_normal(mu.shape)
    return squashed_log_prob(mu, log_std, z)


# ---------------------------------------------------------------- losses


def min_q(critic: Critic, latent: Tensor, action, frozen: bool = False) -> Tensor:
    q1, q2 = critic.heads(latent, action, frozen)
    return T.minimum(q1, q2)


def compute_target(agent: "SacAgent", next_obs: np.ndarray, rewards, dones, rng, steps=None) -> np.ndarray:
    """``y = r + gamma^k (1 - d)(min_i Qtarg_i(s', a') - alpha log pi(a'|s'))``, as a constant array.

    Terminal rows take ``y = r`` directly so masking is exact.
    """
    dt = agent.dtype
    rewards = np.asarray(rewards, dtype=dt)
    dones = np.asarray(dones) > 0.5
    feats = agent.trunk(Tensor(np.asarray(next_obs, dtype=dt)))
    a_next, logp = sample_action(agent.actor, feats, "train", rng)
    targ_latent = agent.critic_targ.proj(agent.trunk_targ(Tensor(np.asarray(next_obs, dtype=dt))))
    v = min_q(agent.critic_targ, targ_latent, a_next.data).data - dt(agent.temperature.alpha) * logp.data
    disc = np.asarray(agent.cfg.gamma ** (1 if steps is None else np.asarray(steps)), dtype=dt)
    return np.where(dones, rewards, rewards + disc * v).astype(dt)


def q_regression(q1: Tensor, q2: Tensor, y: np.ndarray) -> Tensor:
    """``mean_b [(Q1 - y)^2 + (Q2 - y)^2]``."""
    return T.mean(T.square(q1 - y) + T.square(q2 - y))


def critic_loss(agent: "SacAgent", obs, actions, y, aug_spec=None) -> tuple[Tensor, Tensor, Tensor]:
    """Twin-Q regression onto ``y``; in drq_avg mode averaged with the same loss on ``aug(obs)``.

    Returns (loss, anchor latent, anchor min-Q) so rQdia can reuse the anchor pass.
    """
    latent = agent.critic.proj(agent.trunk(T.as_tensor(obs)))
    q1, q2 = agent.critic.heads(latent, actions)
    loss = q_regression(q1, q2, y)
    if agent.cfg.regularizer == "drq_avg":
        aug_obs = augment.apply(np.asarray(T.as_tensor(obs).data), aug_spec)
        qa1, qa2 = agent.critic.heads(agent.critic.proj(agent.trunk(Tensor(aug_obs))), actions)
        loss = 0.5 * (loss + q_regression(qa1, qa2, y))
    return loss, latent, T.minimum(q1, q2)


def pairwise_min_q(critic: Critic, latent: Tensor, actions: np.ndarray) -> Tensor:
    """``(B, n)`` matrix of ``min(Q1, Q2)(s_j, a_i)`` over every state and action."""
    b, n = latent.shape[0], len(actions)
    rows = T.take(latent, np.repeat(np.arange(b), n), axis=0)
    acts = np.tile(np.asarray(actions, dtype=latent.dtype), (b, 1))
    return T.reshape(min_q(critic, rows, acts), (b, n))


def rqdia_loss(agent: "SacAgent", obs, actions, aug_spec, subset: int | None = None,
               rng: np.random.Generator | None = None, anchor_latent: Tensor | None = None) -> Tensor:
    """Mean over states and batch actions of ``(q(s, a_i) - q(aug(s), a_i))^2``, q the twin minimum.

    Both branches carry gradient. ``subset`` evaluates a uniformly drawn
    subset of the batch actions instead of all of them.
    """
    obs = np.asarray(T.as_tensor(obs).data)
    actions = np.asarray(actions)
    if len(obs) < 2:
        raise ValueError("rqdia_loss needs a batch of at least 2 states")
    if subset is not None:
        if not 1 <= subset <= len(actions):
            raise ValueError(f"subset {subset} must lie in [1, {len(actions)}]")
        if subset < len(actions):
            actions = actions[np.sort(rng.choice(len(actions), size=subset, replace=False))]
    if anchor_latent is None:
        anchor_latent = agent.critic.proj(agent.trunk(Tensor(obs)))
    aug_latent = agent.critic.proj(agent.trunk(Tensor(augment.apply(obs, aug_spec))))
    diff = pairwise_min_q(agent.critic, anchor_latent, actions) - pairwise_min_q(agent.critic, aug_latent, actions)
    return T.mean(T.square(diff))


def actor_and_alpha_loss(agent: "SacAgent", features: Tensor, rng) -> tuple[Tensor, Tensor, Tensor]:
    """Actor loss ``mean(alpha log pi - min Q)`` with frozen critic, and the temperature loss.

    ``features`` are treated as constants. Returns (actor_loss, alpha_loss, log_pi).
    """
    features = Tensor(np.asarray(T.as_tensor(features).data))
    action, logp = sample_action(agent.actor, features, "train", rng)
    latent = agent.critic.proj(features, frozen=True)
    q = min_q(agent.critic, latent, action, frozen=True)
    alpha = np.asarray(agent.temperature.alpha, dtype=agent.dtype)
    actor_loss = T.mean(alpha * logp - q)
    slack = (logp.data + agent.temperature.target_entropy).astype(agent.dtype)
    alpha_loss = T.mean(T.neg(agent.temperature.log_alpha) * slack)
    return actor_loss, alpha_loss, logp


def polyak_update(online: Module, target: Module, rho: float) -> None:
    """``target <- rho * target + (1 - rho) * online``."""
    src, dst = online.named_parameters(), target.named_parameters()
    if len(src) != len(dst):
        raise ValueError(f"polyak_update: {len(src)} online vs {len(dst)} target parameters")
    for (name, p), (_, tp) in zip(src, dst):
        if p.shape != tp.shape:
            raise ValueError(f"polyak_update: {name} shape {p.shape} vs target {tp.shape}")
        tp.data = (rho * tp.data + (1.0 - rho) * p.data).astype(tp.dtype)


# ---------------------------------------------------------------- agent


class SacAgent:
    def __init__(self, cfg: SacConfig, obs_shape, action_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.trunk = ConvTrunk(obs_shape, cfg.num_filters, cfg.conv_strides, rng, dtype)
        self.critic = Critic(self.trunk.out_dim, action_dim, cfg, rng, dtype)
        self.actor = Actor(self.trunk.out_dim, action_dim, cfg, rng, dtype)
        self.temperature = Temperature(cfg.init_temperature, action_dim, dtype)
        self.trunk_targ = ConvTrunk(obs_shape, cfg.num_filters, cfg.conv_strides, rng, dtype)
        self.critic_targ = Critic(self.trunk.out_dim, action_dim, cfg, rng, dtype)
        self.trunk_targ.copy_from(self.trunk)
        self.critic_targ.copy_from(self.critic)
        self.critic_params = self.trunk.parameters() + self.critic.parameters()
        self.critic_opt = Adam(self.critic_params, lr=cfg.lr)
        self.actor_opt = Adam(self.actor.parameters(), lr=cfg.lr)
        self.alpha_opt = Adam(self.temperature.parameters(), lr=cfg.alpha_lr)
        self.updates = 0

    # modules and optimizers in a fixed order, for checkpoints
    def modules(self) -> dict[str, Module]:
        return {"trunk": self.trunk, "critic": self.critic, "actor": self.actor,
                "temperature": self.temperature, "trunk_targ": self.trunk_targ,
                "critic_targ": self.critic_targ}

    def optimizers(self) -> dict[str, Adam]:
        return {"critic_opt": self.critic_opt, "actor_opt": self.actor_opt, "alpha_opt": self.alpha_opt}

    def act(self, obs: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
        """Action for one uint8 (or [0, 1] float) observation stack."""
        x = np.asarray(obs)
        x = (x.astype(self.dtype) / 255.0) if x.dtype == np.uint8 else x.astype(self.dtype)
        a, _ = sample_action(self.actor, self.trunk(Tensor(x[None])), mode, rng)
        return a.data[0].astype(np.float32)

    def update_critic(self, batch, aug_spec, rng) -> dict:
        cfg = self.cfg
        dt = self.dtype
        obs = batch.states.astype(dt)
        actions = np.asarray(batch.actions, dtype=dt)
        y = compute_target(self, batch.next_states, batch.rewards, batch.dones, rng, batch.steps)
        with Tape() as tape:
            closs, latent, q = critic_loss(self, obs, actions, y, aug_spec)
            total = closs
            rq = None
            if cfg.regularizer == "rqdia":
                rq = rqdia_loss(self, obs, actions, aug_spec, cfg.rqdia_action_subset, rng, latent)
                total = closs + cfg.rqdia_weight * rq
        tape.backward(total, self.critic_params)
        self.critic_opt.step()
        return {"critic_loss": closs.item(), "rqdia_loss": 0.0 if rq is None else rq.item(),
                "mean_q": float(np.mean(q.data))}

    def update_actor_and_alpha(self, batch, rng) -> dict:
        features = self.trunk(Tensor(batch.states.astype(self.dtype)))
        with Tape() as tape:
            aloss, tloss, logp = actor_and_alpha_loss(self, features, rng)
            total = aloss + tloss
        tape.backward(total, self.actor.parameters() + self.temperature.parameters())
        self.actor_opt.step()
        self.alpha_opt.step()
        return {"actor_loss": aloss.item(), "alpha_loss": tloss.item(), "entropy": float(-np.mean(logp.data))}

    def update_targets(self) -> None:
        cfg = self.cfg
        polyak_update(self.critic.q1, self.critic_targ.q1, 1.0 - cfg.critic_tau)
        polyak_update(self.critic.q2, self.critic_targ.q2, 1.0 - cfg.critic_tau)
        polyak_update(self.critic.proj, self.critic_targ.proj, 1.0 - cfg.encoder_tau)
        polyak_update(self.trunk, self.trunk_targ, 1.0 - cfg.encoder_tau)

    def train_step(self, batch, aug_spec, rng: np.random.Generator) -> dict:
        """Target, critic (+ regulariser), actor, temperature, then targets on schedule."""
        metrics = self.update_critic(batch, aug_spec, rng)
        metrics.update(self.update_actor_and_alpha(batch, rng))
        self.updates += 1
        if self.updates % self.cfg.critic_target_update_freq == 0:
            self.update_targets()
        metrics["alpha"] = self.temperature.alpha
        return metrics


def train_step(agent: SacAgent, batch, aug_spec, rng) -> dict:
    return agent.train_step(batch, aug_spec, rng)

import math

import numpy as np
import pytest

from gradcheck import check
from rqdia.augment import AugmentSpec
from rqdia.c51 import (C51Agent, C51Config, c51_loss, categorical_projection, greedy, logit_kl, logit_mse,
                       q_from_logits, q_values, rqdia_discrete_kl, rqdia_discrete_mse, target_distribution)
from rqdia.replay import Batch, PrioritizedReplay, Transition
from rqdia.tensor import Tensor

TINY = dict(atoms=3, v_min=-1.0, v_max=1.0, channels=(1,), kernels=(3,), strides=(1,), hidden_dim=2,
            noisy=False, batch_size=2, n_step=1, gamma=0.9)


def tiny_agent(seed=0, obs_shape=(1, 4, 4), jitter=True, **kw):
    agent = C51Agent(C51Config(**{**TINY, **kw}), obs_shape, 2, np.random.default_rng(seed), dtype=np.float64)
    if jitter:
        # move every ReLU off its kink
        rng = np.random.default_rng(seed + 1000)
        for p in agent.online.parameters():
            p.data = p.data + rng.normal(0, 0.5, p.shape)
        agent.target.copy_from(agent.online)
    return agent


def small_agent(seed=0, **kw):
    base = dict(atoms=11, channels=(4, 8), kernels=(4, 3), strides=(2, 1), hidden_dim=16, batch_size=4, n_step=3)
    return C51Agent(C51Config(**{**base, **kw}), (3, 16, 16), 3, np.random.default_rng(seed))


def make_batch(rng, n=2, shape=(1, 4, 4), n_actions=2, dtype=np.float64):
    return Batch(states=rng.random((n, *shape)).astype(dtype), actions=rng.integers(0, n_actions, n),
                 rewards=rng.normal(size=n).astype(np.float32), next_states=rng.random((n, *shape)).astype(dtype),
                 dones=(rng.random(n) < 0.3).astype(np.float32), steps=rng.integers(1, 4, n),
                 indices=np.arange(n), serials=np.arange(n), weights=rng.uniform(0.2, 1, n).astype(np.float32))


# ------------------------------------------------ q values


def test_uniform_logits_give_support_mean():
    support = np.linspace(-10, 10, 51)
    np.testing.assert_allclose(q_from_logits(np.zeros((2, 3, 51)), support), 0.0, atol=1e-12)
    support = np.linspace(-1, 3, 5)
    np.testing.assert_allclose(q_from_logits(np.zeros((1, 2, 5)), support), 1.0)


def test_point_mass_gives_atom_value():
    support = np.linspace(-10, 10, 51)
    logits = np.full((1, 1, 51), -1e4)
    logits[0, 0, 37] = 0.0
    assert q_from_logits(logits, support)[0, 0] == pytest.approx(support[37])


def test_random_logits_match_scalar_dot_products(rng):
    support = np.linspace(-10, 10, 51)
    logits = rng.normal(0, 3, (4, 3, 51))
    q = q_from_logits(logits, support)
    for b in range(4):
        for a in range(3):
            e = [math.exp(v) for v in logits[b, a]]
            s = sum(e)
            assert q[b, a] == pytest.approx(sum(ei / s * z for ei, z in zip(e, support)), abs=1e-5)
            assert -10 <= q[b, a] <= 10


def test_network_rows_are_distributions():
    agent = small_agent()
    obs = np.random.default_rng(0).random((5, 3, 16, 16)).astype(np.float32)
    logits = agent.online(Tensor(obs)).data
    assert logits.shape == (5, 3, 11)
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)
    assert q_values(agent.online, obs, agent.support).shape == (5, 3)


# ------------------------------------------------ projection


def project_oracle(probs, r, gamma_n, done, support):
    """Per-atom brute force: clamp each shifted atom, find its bracket by scanning, split linearly."""
    n = len(support)
    out = [0.0] * n
    for j in range(n):
        tz = r + (0.0 if done else gamma_n) * support[j]
        tz = min(max(tz, support[0]), support[-1])
        for k in range(n - 1):
            if support[k] <= tz <= support[k + 1]:
                frac = (tz - support[k]) / (support[k + 1] - support[k])
                out[k] += probs[j] * (1 - frac)
                out[k + 1] += probs[j] * frac
                break
    return np.array(out)


def test_projection_worked_example():
    support = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    p = np.array([[0, 0, 0, 1.0, 0]])
    out = categorical_projection(p, [0.5], 1.0, [0.0], support)
    np.testing.assert_allclose(out, [[0, 0, 0, 0.5, 0.5]])
    np.testing.assert_allclose(out[0], project_oracle(p[0], 0.5, 1.0, False, support))


def test_projection_identity_and_terminal():
    rng = np.random.default_rng(0)
    support = np.linspace(-3, 3, 7)
    p = rng.dirichlet(np.ones(7), size=3)
    np.testing.assert_allclose(categorical_projection(p, np.zeros(3), 1.0, np.zeros(3), support), p, atol=1e-12)
    out = categorical_projection(p, [0.4, -7.0, 2.0], 0.9, np.ones(3), support)
    np.testing.assert_allclose(out[0], [0, 0, 0, 0.6, 0.4, 0, 0], atol=1e-12)
    np.testing.assert_allclose(out[1], [1, 0, 0, 0, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(out[2], [0, 0, 0, 0, 0, 1, 0], atol=1e-12)


def test_projection_matches_brute_force_oracle():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        lo = rng.uniform(-5, 0)
        support = np.linspace(lo, lo + rng.uniform(0.5, 10), n)
        p = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 2))
        r, g, d = rng.uniform(-6, 6), rng.uniform(0, 1), bool(rng.random() < 0.25)
        out = categorical_projection(p[None], [r], g, [float(d)], support)[0]
        np.testing.assert_allclose(out, project_oracle(p, r, g, d, support), atol=1e-6)
        assert abs(out.sum() - 1) <= 1e-6


def test_projection_preserves_mean_without_clamping(rng):
    support = np.linspace(-10, 10, 51)
    for _ in range(100):
        p = rng.dirichlet(np.ones(51))
        g = rng.uniform(0, 0.5)
        r = rng.uniform(-4, 4)
        out = categorical_projection(p[None], [r], g, [0.0], support)[0]
        assert out @ support == pytest.approx(r + g * (p @ support), abs=1e-6)


# ------------------------------------------------ losses


def test_cross_entropy_at_target_is_entropy():
    agent = tiny_agent()
    batch = make_batch(np.random.default_rng(1))
    logits = agent.online(Tensor(batch.states)).data
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    m = p[np.arange(2), batch.actions]
    _, ce, _ = c51_loss(agent, batch, m)
    np.testing.assert_allclose(ce, -(m * np.log(m)).sum(1), rtol=1e-12)


def test_unit_weights_give_plain_mean():
    agent = tiny_agent()
    batch = make_batch(np.random.default_rng(2))
    batch.weights = np.ones(2, np.float32)
    loss, ce, _ = c51_loss(agent, batch)
    assert loss.item() == pytest.approx(ce.mean(), rel=1e-12)


def np_forward(net, x):
    """Independent numpy forward pass of a non-noisy network for one observation."""
    h = x
    for conv in net.convs:
        w, b = conv.weight.data, conv.bias.data
        f, _, k, _ = w.shape
        s = conv.stride
        size = (h.shape[-1] - k) // s + 1
        out = np.zeros((f, size, size))
        for o in range(f):
            for i in range(size):
                for j in range(size):
                    out[o, i, j] = np.sum(h[:, i * s:i * s + k, j * s:j * s + k] * w[o]) + b[o]
        h = np.maximum(out, 0)
    h = h.reshape(-1)

    def lin(layer, v):
        return v @ layer.weight.data + layer.bias.data

    adv = lin(net.fc_z_a, np.maximum(lin(net.fc_h_a, h), 0)).reshape(net.n_actions, net.atoms)
    val = lin(net.fc_z_v, np.maximum(lin(net.fc_h_v, h), 0))
    return val[None, :] + adv - adv.mean(0, keepdims=True)


def test_loss_matches_scalar_recomputation():
    agent = tiny_agent(3)
    for p in agent.target.parameters():
        p.data = p.data + 0.3
    rng = np.random.default_rng(3)
    batch = make_batch(rng, n=1)
    batch.dones[:] = 0
    loss, ce, _ = c51_loss(agent, batch)
    z = agent.support
    soft = lambda v: np.exp(v - v.max()) / np.exp(v - v.max()).sum()
    q_next = [sum(soft(row) * z) for row in np_forward(agent.online, batch.next_states[0])]
    a_star = int(np.argmax(q_next))
    p_next = soft(np_forward(agent.target, batch.next_states[0])[a_star])
    m = project_oracle(p_next, float(batch.rewards[0]), 0.9 ** int(batch.steps[0]), False, z)
    logp = np.log(soft(np_forward(agent.online, batch.states[0])[batch.actions[0]]))
    expected = -(m * logp).sum()
    assert ce[0] == pytest.approx(expected, rel=1e-9)
    assert loss.item() == pytest.approx(expected * batch.weights[0], rel=1e-6)


def test_double_q_uses_online_argmax():
    agent = tiny_agent(5)
    for p in agent.target.parameters():
        p.data = np.random.default_rng(9).normal(size=p.shape)
    batch = make_batch(np.random.default_rng(4), n=8)
    _, a_star = target_distribution(agent, batch)
    online_q = q_from_logits(agent.online(Tensor(batch.next_states)).data, agent.support)
    np.testing.assert_array_equal(a_star, np.argmax(online_q, axis=1))


def test_logit_mse_examples(rng):
    a = rng.normal(size=(3, 2, 5))
    assert logit_mse(Tensor(a), Tensor(a + 1.0)).item() == pytest.approx(1.0)
    b = rng.normal(size=(3, 2, 5))
    assert logit_mse(Tensor(a), Tensor(b)).item() == logit_mse(Tensor(b), Tensor(a)).item()


def test_logit_kl_examples(rng):
    val = logit_kl(np.log([[0.75, 0.25]]), Tensor(np.log([[0.5, 0.5]]))).item()
    assert val == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)
    assert val == pytest.approx(0.1308, abs=1e-4)
    x = rng.normal(size=(4, 3, 7))
    assert logit_kl(x, Tensor(x)).item() == 0.0
    for _ in range(1000):
        p, q = rng.normal(0, 3, (2, 6)), rng.normal(0, 3, (2, 6))
        assert logit_kl(p, Tensor(q)).item() >= 0.0


@pytest.mark.parametrize("fn", [rqdia_discrete_mse, rqdia_discrete_kl])
def test_identity_augmentation_gives_zero(fn):
    agent = small_agent(noisy=True)
    agent.online.sample_noise(np.random.default_rng(0))
    obs = np.random.default_rng(1).random((4, 3, 16, 16)).astype(np.float32)
    assert fn(agent, obs, AugmentSpec("identity")).item() == 0.0
    assert fn(agent, obs, AugmentSpec.from_seed("random_shift", 0)).item() > 0.0


# ------------------------------------------------ finite differences


def test_tiny_net_size():
    assert tiny_agent().online.num_params() <= 64


@pytest.mark.parametrize("mode", ["off", "mse", "kl"])
@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient(mode, seed):
    agent = tiny_agent(seed, rqdia_mode=mode)
    batch = make_batch(np.random.default_rng(seed))
    m, _ = target_distribution(agent, batch)
    # the KL anchor is a stop-gradient target, so the oracle holds it at the base point
    frozen_anchor = Tensor(agent.online(Tensor(batch.states)).data.copy())

    def loss():
        closs, _, logits = c51_loss(agent, batch, m)
        spec = AugmentSpec.from_seed("random_shift", seed, pad=1)
        if mode == "mse":
            return closs + rqdia_discrete_mse(agent, batch.states, spec, logits)
        if mode == "kl":
            return closs + rqdia_discrete_kl(agent, batch.states, spec, frozen_anchor)
        return closs

    assert check(loss, agent.online.parameters()) < 1e-5


def test_noisy_dueling_gradient():
    agent = tiny_agent(1, noisy=True, rqdia_mode="mse")
    agent.online.sample_noise(np.random.default_rng(0))
    batch = make_batch(np.random.default_rng(1))
    m, _ = target_distribution(agent, batch)

    def loss():
        closs, _, logits = c51_loss(agent, batch, m)
        return closs + rqdia_discrete_mse(agent, batch.states, AugmentSpec.from_seed("intensity", 2), logits)

    assert check(loss, agent.online.parameters()) < 1e-5


# ------------------------------------------------ acting


def test_greedy_and_ties():
    assert greedy(np.array([1.0, 0.0, 0.0])) == 0
    assert greedy(np.array([0.5, 0.5, 0.0])) == 0
    assert greedy(np.array([0.0, 2.0, 2.0])) == 1


def test_eval_act_forces_argmax():
    agent = small_agent(noisy=False)
    last = agent.online.fc_z_a
    last.weight.data[:] = 0.0
    bias = np.full((3, 11), -50.0, dtype=np.float32)
    bias[0, -1] = 50.0  # action 0 puts its mass on the top atom
    bias[1:, 0] = 50.0
    last.bias.data = bias.reshape(-1)
    obs = np.zeros((3, 16, 16), np.uint8)
    assert agent.act(obs, "eval") == 0


def test_epsilon_one_is_uniform():
    agent = small_agent(noisy=False)
    rng = np.random.default_rng(0)
    obs = np.zeros((3, 16, 16), np.uint8)
    draws = 10_000
    counts = np.bincount([agent.act(obs, "train", rng, epsilon=1.0) for _ in range(draws)], minlength=3)
    p = 1 / 3
    assert np.all(np.abs(counts - draws * p) < 3 * np.sqrt(draws * p * (1 - p)))


def test_epsilon_schedule():
    cfg = C51Config(noisy=False, eps_start=1.0, eps_end=0.1, eps_decay_steps=100)
    assert cfg.epsilon(0) == 1.0 and cfg.epsilon(50) == pytest.approx(0.55) and cfg.epsilon(1000) == pytest.approx(0.1)
    assert C51Config().epsilon(0) == 0.0


def test_config_errors():
    with pytest.raises(ValueError):
        C51Config(atoms=1)
    with pytest.raises(ValueError):
        C51Config(v_min=1, v_max=1)
    with pytest.raises(ValueError):
        C51Config(rqdia_mode="huber")


# ------------------------------------------------ training


def filled_replay(n=40, seed=0):
    rng = np.random.default_rng(seed)
    per = PrioritizedReplay(64, alpha=0.5)
    for k in range(n):
        s = rng.integers(0, 256, (3, 16, 16), dtype=np.uint8)
        per.push(Transition(s, int(rng.integers(0, 3)), float(rng.choice([-1, 0, 1])),
                            rng.integers(0, 256, (3, 16, 16), dtype=np.uint8), bool(rng.random() < 0.2), 3))
    return per


def run(agent, steps, aug_kind, seed=0):
    replay = filled_replay(seed=seed)
    rng, rrng = np.random.default_rng(seed + 1), np.random.default_rng(seed + 2)
    aug = AugmentSpec.from_seed(aug_kind, seed + 3)
    return [agent.train_step(replay, aug, rng, rrng, 0.4) for _ in range(steps)], replay


def params_bytes(agent):
    return b"".join(p.data.tobytes() for p in agent.online.parameters() + agent.target.parameters())


@pytest.mark.parametrize("mode", ["mse", "kl"])
def test_identity_rqdia_matches_off(mode):
    off, on = small_agent(1, target_update_period=3), small_agent(1, target_update_period=3, rqdia_mode=mode)
    m_off, r_off = run(off, 5, "identity")
    m_on, r_on = run(on, 5, "identity")
    assert all(m["rqdia_loss"] == 0.0 for m in m_on)
    assert m_off == m_on
    assert params_bytes(off) == params_bytes(on)
    assert r_off.tree.nodes.tobytes() == r_on.tree.nodes.tobytes()


def test_target_only_changes_on_schedule():
    agent = small_agent(2, target_update_period=3)
    snap = lambda: b"".join(p.data.tobytes() for p in agent.target.parameters())
    before = snap()
    run(agent, 2, "random_shift")
    assert snap() == before
    run(agent, 1, "random_shift", seed=4)
    assert snap() == b"".join(p.data.tobytes() for p in agent.online.parameters())


def test_priorities_equal_cross_entropy():
    agent = small_agent(3)
    replay = filled_replay()
    rng, rrng = np.random.default_rng(0), np.random.default_rng(1)
    state = np.random.default_rng(1).bit_generator.state
    batch, idx, _ = replay.sample_prioritized(4, np.random.default_rng(1), 0.4)
    rrng.bit_generator.state = state
    clone = small_agent(3)
    _, ce = clone.learn(batch, AugmentSpec("identity"), np.random.default_rng(0))
    agent.train_step(replay, AugmentSpec("identity"), rng, rrng, 0.4)
    # later duplicates of an index win, as with sequential writes
    expected = {}
    for i, c in zip(idx, ce):
        expected[int(i)] = (abs(c) + 1e-6) ** 0.5
    for i, v in expected.items():
        assert replay.tree.leaves()[i] == pytest.approx(v, rel=1e-6)


def test_learning_metrics_finite():
    agent = small_agent(0, rqdia_mode="kl")
    metrics, _ = run(agent, 3, "random_shift")
    for m in metrics:
        assert set(m) >= {"c51_loss", "rqdia_loss", "mean_q"}
        assert all(np.isfinite(v) for v in m.values())

"""Replay storage: a uniform FIFO ring, a sum-tree prioritized ring, and n-step folding."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class ReplayUnderfilled(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray | int
    reward: float
    next_state: np.ndarray
    done: bool
    # number of environment steps folded into ``reward`` (bootstrap with gamma**steps)
    steps: int = 1


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    steps: np.ndarray
    indices: np.ndarray
    serials: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions.

    Pixel stacks are kept as uint8 and divided by 255 when sampled. Storage
    arrays are allocated on the first push, sized from that transition.
    """

    def __init__(self, capacity: int, min_fill: int = 1):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.min_fill = max(1, min_fill)
        self.size = 0
        self.cursor = 0
        self.pushed = 0
        self._states = None

    def __len__(self) -> int:
        return self.size

    def _allocate(self, t: Transition) -> None:
        cap = self.capacity
        shape = np.shape(t.state)
        self._states = np.zeros((cap, *shape), dtype=np.uint8)
        self._next = np.zeros((cap, *shape), dtype=np.uint8)
        act = np.asarray(t.action)
        self.discrete = act.dtype.kind in "iu"
        self._actions = np.zeros((cap, *act.shape), dtype=np.int64 if self.discrete else np.float32)
        self._rewards = np.zeros(cap, dtype=np.float32)
        self._dones = np.zeros(cap, dtype=np.float32)
        self._steps = np.ones(cap, dtype=np.int64)
        self._serials = np.full(cap, -1, dtype=np.int64)

    def push(self, t: Transition) -> int:
        if self._states is None:
            self._allocate(t)
        i = self.cursor
        self._states[i] = t.state
        self._next[i] = t.next_state
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._dones[i] = float(t.done)
        self._steps[i] = t.steps
        self._serials[i] = self.pushed
        self.pushed += 1
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def transition(self, i: int) -> Transition:
        act = self._actions[i]
        return Transition(self._states[i].copy(), int(act) if self.discrete else act.copy(),
                          float(self._rewards[i]), self._next[i].copy(), bool(self._dones[i]),
                          int(self._steps[i]))

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        return [self.transition((start + k) % self.capacity) for k in range(self.size)]

    def _check_fill(self, batch_size: int) -> None:
        if self.size < self.min_fill or self.size == 0:
            raise ReplayUnderfilled(f"replay holds {self.size} transitions; sampling needs "
                                    f"at least {self.min_fill}")
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")

    def gather(self, idx: np.ndarray, weights: np.ndarray | None = None) -> Batch:
        if weights is None:
            weights = np.ones(len(idx), dtype=np.float32)
        return Batch(
            states=self._states[idx].astype(np.float32) / 255.0,
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next[idx].astype(np.float32) / 255.0,
            dones=self._dones[idx],
            steps=self._steps[idx],
            indices=idx,
            serials=self._serials[idx],
            weights=weights.astype(np.float32),
        )

    def sample_uniform(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """``batch_size`` independent uniform draws, with replacement."""
        self._check_fill(batch_size)
        return self.gather(rng.integers(0, self.size, size=batch_size))


class SumTree:
    """Array-backed binary tree whose internal nodes hold the sum of their children.

    Leaves live at ``[leaf0, leaf0 + capacity)`` with ``leaf0`` a power of two;
    node ``k`` has children ``2k`` and ``2k + 1``; the root is node 1.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.leaf0 = 1 << max(0, (capacity - 1).bit_length())
        self.nodes = np.zeros(2 * self.leaf0, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.leaf0:self.leaf0 + self.capacity]

    def update(self, indices, values) -> None:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64)) + self.leaf0
        vals = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        # last write wins for repeated indices, matching sequential assignment
        self.nodes[idx] = vals
        parents = np.unique(idx >> 1)
        while parents.size and parents[0] >= 1:
            self.nodes[parents] = self.nodes[2 * parents] + self.nodes[2 * parents + 1]
            if parents[0] == 1:
                break
            parents = np.unique(parents >> 1)

    def find(self, prefix) -> np.ndarray:
        """Leaf index holding each cumulative-sum ``prefix`` (vectorised descent)."""
        u = np.array(prefix, dtype=np.float64, ndmin=1)
        node = np.ones(u.shape, dtype=np.int64)
        while node[0] < self.leaf0:
            left = 2 * node
            lsum = self.nodes[left]
            # never descend into an empty subtree
            go_right = ((u > lsum) | (lsum <= 0)) & (self.nodes[left + 1] > 0)
            u = np.where(go_right, u - lsum, u)
            node = np.where(go_right, left + 1, left)
        return node - self.leaf0


class PrioritizedReplay(ReplayBuffer):
    """Proportional prioritized replay.

    Leaves store ``p**alpha`` so sampling is proportional to leaf value;
    fresh transitions get the running maximum leaf value.
    """

    def __init__(self, capacity: int, alpha: float = 0.5, min_fill: int = 1, priority_eps: float = 1e-6):
        super().__init__(capacity, min_fill)
        self.alpha = alpha
        self.priority_eps = priority_eps
        self.tree = SumTree(capacity)
        self.max_priority = 1.0

    def push(self, t: Transition) -> int:
        i = super().push(t)
        self.tree.update(i, self.max_priority)
        return i

    def probabilities(self, idx: np.ndarray) -> np.ndarray:
        return self.tree.nodes[self.tree.leaf0 + idx] / self.tree.total

    def sample_prioritized(self, batch_size: int, rng: np.random.Generator,
                           beta: float = 0.4) -> tuple[Batch, np.ndarray, np.ndarray]:
        """Stratified proportional sample; weights ``(N P(i))**-beta`` scaled to max 1."""
        self._check_fill(batch_size)
        total = self.tree.total
        seg = total / batch_size
        u = (np.arange(batch_size) + rng.random(batch_size)) * seg
        idx = self.tree.find(np.minimum(u, total * (1 - 1e-12)))
        probs = self.probabilities(idx)
        w = (self.size * probs) ** (-beta)
        w = w / w.max()
        batch = self.gather(idx, w)
        return batch, idx, batch.weights

    def update_priorities(self, indices, td_errors, serials=None) -> None:
        """Store ``(|td| + eps)**alpha``; indices whose slot was overwritten since sampling are skipped."""
        idx = np.asarray(indices, dtype=np.int64)
        pri = (np.abs(np.asarray(td_errors, dtype=np.float64)) + self.priority_eps) ** self.alpha
        if serials is not None:
            keep = self._serials[idx] == np.asarray(serials)
            idx, pri = idx[keep], pri[keep]
        keep = idx < self.size
        idx, pri = idx[keep], pri[keep]
        if idx.size == 0:
            return
        self.tree.update(idx, pri)
        self.max_priority = max(self.max_priority, float(pri.max()))


def linear_beta(step: int, total_steps: int, start: float = 0.4, end: float = 1.0) -> float:
    if total_steps <= 0:
        return end
    frac = min(max(step / total_steps, 0.0), 1.0)
    return start + frac * (end - start)


class NStepFolder:
    """Streams raw transitions into n-step transitions.

    Emits ``(s_t, a_t, sum_k gamma**k r_{t+k}, s_{t+m}, done)`` once ``n``
    transitions are pending; an episode end flushes every pending start.
    """

    def __init__(self, n: int, gamma: float):
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        self.n = n
        self.gamma = gamma
        self.pending: deque[Transition] = deque()

    def _fold(self) -> Transition:
        first = self.pending[0]
        ret = 0.0
        for k, t in enumerate(self.pending):
            ret += (self.gamma ** k) * t.reward
        last = self.pending[-1]
        return Transition(first.state, first.action, ret, last.next_state,
                          any(t.done for t in self.pending), len(self.pending))

    def fold(self, t: Transition, episode_end: bool = False) -> list[Transition]:
        self.pending.append(t)
        out = []
        if t.done or episode_end:
            while self.pending:
                out.append(self._fold())
                self.pending.popleft()
        elif len(self.pending) == self.n:
            out.append(self._fold())
            self.pending.popleft()
        return out

    def reset(self) -> None:
        self.pending.clear()


def fold_nstep(folder: NStepFolder, t: Transition, episode_end: bool = False) -> list[Transition]:
    return folder.fold(t, episode_end)

"""Experience replay for the multi-actor learner: n-step transitions, local and global buffers."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np

PRIORITY_EPS = 1e-6


@dataclass
class Transition:
    stacked_obs: np.ndarray
    action: np.ndarray
    n_step_return: float
    bootstrap_obs: np.ndarray
    successor_obs: np.ndarray
    done: bool
    priority: float = 0.0


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    n_step_return: np.ndarray
    bootstrap_obs: np.ndarray
    successor_obs: np.ndarray
    done: np.ndarray

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        return cls(
            obs=np.stack([t.stacked_obs for t in items]),
            action=np.stack([np.asarray(t.action, dtype=np.float64) for t in items]),
            n_step_return=np.array([t.n_step_return for t in items], dtype=np.float64),
            bootstrap_obs=np.stack([t.bootstrap_obs for t in items]),
            successor_obs=np.stack([t.successor_obs for t in items]),
            done=np.array([t.done for t in items], dtype=bool),
        )


def make_n_step(window, gamma: float, n: int) -> Transition:
    """Build one transition from up to ``n`` consecutive ``(s, a, r, s_next, done)`` steps.

    The return is accumulated front to back as ``sum_k gamma**k * r_k`` and stops
    at the first terminal step.
    """
    if not window:
        raise ValueError("make_n_step: empty window")
    s0, a0, _, s1, _ = window[0]
    ret = 0.0
    done = False
    last_next = s1
    for k, (_, _, r, s_next, d) in enumerate(window[:n]):
        ret += gamma**k * r
        last_next = s_next
        if d:
            done = True
            break
    return Transition(s0, np.asarray(a0, dtype=np.float64), ret, last_next, s1, done)


class NStepAccumulator:
    """Turns an actor's step stream into n-step transitions, flushing at episode end."""

    def __init__(self, gamma: float, n: int):
        self.gamma = gamma
        self.n = n
        self.window: deque = deque()

    def push(self, s, a, r, s_next, done) -> list[Transition]:
        self.window.append((s, a, r, s_next, done))
        out = []
        if done:
            while self.window:
                out.append(make_n_step(list(self.window), self.gamma, self.n))
                self.window.popleft()
        elif len(self.window) == self.n:
            out.append(make_n_step(list(self.window), self.gamma, self.n))
            self.window.popleft()
        return out

    def clear(self):
        self.window.clear()


class SumTree:
    """Binary sum tree over a fixed number of leaves; parents are recomputed, not patched."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.nodes = np.zeros(2 * size, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, idx: int) -> float:
        return float(self.nodes[self.size + idx])

    def set(self, idx: int, value: float) -> None:
        i = self.size + idx
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def set_many(self, idx, values) -> None:
        for i, v in zip(np.asarray(idx).tolist(), np.asarray(values, dtype=np.float64).tolist()):
            self.set(i, v)

    def find(self, mass: float) -> int:
        """Leaf index whose cumulative-priority interval contains ``mass``."""
        i = 1
        nodes = self.nodes
        while i < self.size:
            left = 2 * i
            if mass < nodes[left] or nodes[left + 1] == 0:
                i = left
            else:
                mass -= nodes[left]
                i = left + 1
        return i - self.size

    def leaves(self) -> np.ndarray:
        return self.nodes[self.size: self.size + self.capacity]


class LocalBuffer:
    def __init__(self, capacity: int = 2000, actor_id: int = 0):
        self.capacity = capacity
        self.actor_id = actor_id
        self.items: deque = deque(maxlen=capacity)
        self.dropped = 0

    def __len__(self):
        return len(self.items)

    def push(self, t) -> None:
        if len(self.items) == self.capacity:
            self.dropped += 1
        self.items.append(t)
        assert len(self.items) <= self.capacity

    def drain(self) -> list:
        out = list(self.items)
        self.items.clear()
        return out


def push_local(local: LocalBuffer, t, global_buf: "GlobalBuffer | None" = None,
               flush_threshold: int = 200, episode_end: bool = False) -> int:
    """Push one transition; flush to ``global_buf`` on threshold or episode end. Returns items flushed."""
    local.push(t)
    if global_buf is not None and (episode_end or len(local) >= flush_threshold):
        return flush(local, global_buf)
    return 0


def flush(local: LocalBuffer, global_buf: "GlobalBuffer") -> int:
    items = local.drain()
    global_buf.add_batch(items)
    return len(items)


class InsufficientSamples(ValueError):
    pass


class GlobalBuffer:
    """Ring of transitions with oldest-first eviction and a priority sum tree.

    Inserts are linearisable batches; sampling and priority updates hold the
    same lock, so a sample sees a consistent snapshot.
    """

    def __init__(self, capacity: int = 45000, alpha: float = 0.6):
        self.capacity = capacity
        self.alpha = alpha
        self.data: list[Any] = [None] * capacity
        self.tree = SumTree(capacity)
        # raw (un-exponentiated) priorities; new items enter at their max
        self.raw = np.zeros(capacity, dtype=np.float64)
        self.inserted = 0  # total ever inserted
        self.size = 0
        self.lock = threading.Lock()

    def __len__(self):
        return self.size

    @property
    def evicted(self) -> int:
        return self.inserted - self.size

    def slot_of(self, serial: int) -> int:
        return serial % self.capacity

    def add_batch(self, items) -> None:
        with self.lock:
            p = float(self.raw[: self.size].max()) if self.size else 1.0
            for t in items:
                slot = self.inserted % self.capacity
                self.data[slot] = t
                self.raw[slot] = p
                if hasattr(t, "priority"):
                    t.priority = p
                self.tree.set(slot, p ** self.alpha)
                self.inserted += 1
                self.size = min(self.size + 1, self.capacity)
                assert self.size <= self.capacity

    def add(self, t) -> None:
        self.add_batch([t])

    def serial_at(self, slot: int) -> int:
        """Insertion serial of the item currently resident in ``slot``."""
        newest = self.inserted - 1
        return newest - ((newest - slot) % self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator,
               mode: Literal["uniform", "prioritized"] = "prioritized", beta: float = 0.4):
        """Returns (items, importance weights, indices); indices are insertion serials."""
        with self.lock:
            if self.size < batch_size or self.size == 0:
                raise InsufficientSamples(f"buffer holds {self.size}, need {batch_size}")
            if mode == "uniform":
                slots = rng.integers(0, self.size, size=batch_size)
                weights = np.ones(batch_size)
            elif mode == "prioritized":
                total = self.tree.total
                mass = rng.random(batch_size) * total
                slots = np.array([self.tree.find(m) for m in mass], dtype=np.int64)
                probs = self.tree.leaves()[slots] / total
                weights = (self.size * probs) ** (-beta)
                weights = weights / weights.max()
            else:
                raise ValueError(f"unknown sampling mode {mode!r}")
            items = [self.data[s] for s in slots]
            serials = np.array([self.serial_at(int(s)) for s in slots], dtype=np.int64)
            return items, weights, serials

    def update_priorities(self, indices, td_errors) -> None:
        """Set priority |td| + eps for still-resident serials; evicted ones are skipped."""
        with self.lock:
            oldest = self.inserted - self.size
            for serial, td in zip(np.asarray(indices).tolist(), np.asarray(td_errors, dtype=np.float64).tolist()):
                if serial < oldest or serial >= self.inserted:
                    continue
                slot = serial % self.capacity
                p = abs(td) + PRIORITY_EPS
                self.raw[slot] = p
                if self.data[slot] is not None and hasattr(self.data[slot], "priority"):
                    self.data[slot].priority = p
                self.tree.set(slot, p ** self.alpha)

    def priorities(self) -> np.ndarray:
        return self.raw[: self.size].copy()

    def rescan_total(self) -> float:
        return float(np.sum(self.raw[: self.size] ** self.alpha))


def sample(global_buf: GlobalBuffer, batch_size: int, mode: str = "prioritized",
           rng: np.random.Generator | None = None, beta: float = 0.4):
    return global_buf.sample(batch_size, rng or np.random.default_rng(), mode, beta)


def update_priorities(global_buf: GlobalBuffer, indices, td_errors) -> None:
    global_buf.update_priorities(indices, td_errors)

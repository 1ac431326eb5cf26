"""Proportional prioritized replay over an array-backed sum-tree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .tensor import ContractError


class SumTree:
    """Complete binary tree of partial sums.

    Leaves are padded up to a power of two so every leaf sits at the same depth
    and an update touches exactly ``log2(leaves)`` ancestors. Node ``1`` is the
    root; node ``i`` has children ``2i`` and ``2i + 1``.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.leaves = 1 << max(0, (capacity - 1).bit_length())
        self.depth = self.leaves.bit_length() - 1
        self.nodes = np.zeros(2 * self.leaves)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaf(self, slot) -> np.ndarray:
        return self.nodes[self.leaves + np.asarray(slot)]

    def update(self, slot: int, value: float) -> list[int]:
        """Set one leaf and recompute its ancestors; returns the touched ancestors."""
        if not 0 <= slot < self.capacity:
            raise ContractError(f"slot {slot} outside [0, {self.capacity})")
        if value < 0 or not np.isfinite(value):
            raise ContractError(f"priority must be finite and >= 0, got {value}")
        i = self.leaves + slot
        self.nodes[i] = value
        touched = []
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            touched.append(i)
            i //= 2
        return touched

    def find(self, values: np.ndarray) -> np.ndarray:
        """Vectorised prefix-sum search; returns leaf slots.

        Descends right only when the right subtree has positive mass, so a
        zero-priority leaf is never returned while any mass exists.
        """
        idx = np.ones(len(values), dtype=np.int64)
        v = np.asarray(values, dtype=float).copy()
        for _ in range(self.depth):
            left = 2 * idx
            lmass = self.nodes[left]
            rmass = self.nodes[left + 1]
            go_right = ((v >= lmass) & (rmass > 0)) | (lmass <= 0)
            v = np.where(go_right, v - lmass, v)
            idx = np.where(go_right, left + 1, left)
        return idx - self.leaves


@dataclass
class Sample:
    items: list
    weights: np.ndarray
    ids: np.ndarray
    slots: np.ndarray


class PrioritizedReplay:
    """Ring buffer with proportional prioritisation.

    Stored priorities are raw ``|delta| + eps``; the tree holds ``p ** alpha``.
    ``push`` returns a monotone insertion id; an id is stale once its slot has
    been overwritten, and stale ids are skipped by :meth:`update_priorities`.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, seed: int | np.random.Generator = 0):
        self.tree = SumTree(capacity)
        self.capacity = capacity
        self.alpha = alpha
        self.items: list[Any] = [None] * capacity
        self.raw = np.zeros(capacity)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.next_id = 0
        self.size = 0
        self.max_priority = 1.0
        self.stale_updates = 0
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def push(self, item: Any) -> int:
        slot = self.next_id % self.capacity
        p = max(self.max_priority, 1.0)
        self.items[slot] = item
        self.raw[slot] = p
        self.ids[slot] = self.next_id
        self.tree.update(slot, p ** self.alpha)
        self.size = min(self.size + 1, self.capacity)
        self.next_id += 1
        return self.next_id - 1

    def extend(self, items: Sequence[Any]) -> np.ndarray:
        return np.array([self.push(it) for it in items], dtype=np.int64)

    def sample(self, batch_size: int, beta: float) -> Sample:
        if self.size < batch_size:
            raise ContractError(f"buffer holds {self.size} transitions, cannot sample {batch_size}")
        total = self.tree.total
        seg = total / batch_size
        u = (np.arange(batch_size) + self.rng.random(batch_size)) * seg
        u = np.minimum(u, np.nextafter(total, 0.0))
        slots = self.tree.find(u)
        probs = self.tree.leaf(slots) / total
        w = (self.size * probs) ** (-beta)
        w = w / w.max()
        return Sample([self.items[s] for s in slots], w, self.ids[slots].copy(), slots)

    def update_priorities(self, ids: Sequence[int], td_errors: Sequence[float], eps: float = 0.01) -> int:
        """Set ``p = |delta| + eps`` for each live id; returns how many were stale."""
        stale = 0
        for i, d in zip(np.asarray(ids), np.asarray(td_errors, dtype=float)):
            slot = int(i) % self.capacity
            if self.ids[slot] != i:
                stale += 1
                continue
            p = abs(float(d)) + eps
            self.raw[slot] = p
            self.max_priority = max(self.max_priority, p)
            self.tree.update(slot, p ** self.alpha)
        self.stale_updates += stale
        return stale

    def leaf_sum(self) -> float:
        return float(np.sum(self.raw[: self.size] ** self.alpha)) if self.size < self.capacity \
            else float(np.sum(self.raw ** self.alpha))


def beta_schedule(step: int, total: int, start: float = 0.4, end: float = 1.0) -> float:
    if total <= 1:
        return end
    return start + (end - start) * min(1.0, step / (total - 1))

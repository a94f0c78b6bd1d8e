"""Bounded replay memories: FIFO, Reservoir, Hybrid-CBRS and unbounded Full."""
from __future__ import annotations

import json
from collections import deque
from pathlib import Path

import numpy as np

from .stream import ActionLabel, Sample, sample_record

POLICIES = ("FIFO", "Reservoir", "HybridCBRS", "Full")


class ReplayMemory:
    """Sample store with a fixed storage policy.

    Hybrid-CBRS keeps one sub-store per action and balances them by evicting
    from the largest one while fewer than ``capacity`` distinct actions have
    been observed; from then on it behaves as a global reservoir.
    """

    def __init__(self, policy: str, capacity: int | None = None, rng=None):
        if policy not in POLICIES:
            raise ValueError(f"unknown storage policy {policy!r}; expected one of {POLICIES}")
        if policy == "Full":
            capacity = None
        elif capacity is None or capacity < 1:
            raise ValueError(f"{policy} memory needs a capacity >= 1")
        self.policy = policy
        self.capacity = capacity
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.t_seen = 0
        self._items: deque[Sample] | list[Sample] = deque() if policy == "FIFO" else []
        # Hybrid-CBRS bookkeeping; dicts keep first-observed class order
        self.class_store: dict[ActionLabel, list[Sample]] = {}
        self.class_seen: dict[ActionLabel, int] = {}
        self.filled: set[ActionLabel] = set()

    @property
    def observed(self) -> set[ActionLabel]:
        return set(self.class_seen)

    def __len__(self):
        if self.policy == "HybridCBRS":
            return sum(len(v) for v in self.class_store.values())
        return len(self._items)

    def samples(self) -> list[Sample]:
        if self.policy == "HybridCBRS":
            return [s for store in self.class_store.values() for s in store]
        return list(self._items)

    def class_counts(self) -> dict[ActionLabel, int]:
        if self.policy == "HybridCBRS":
            return {c: len(v) for c, v in self.class_store.items() if v}
        counts: dict[ActionLabel, int] = {}
        for s in self._items:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def store(self, sample: Sample) -> None:
        self.t_seen += 1
        if self.policy == "Full":
            self._items.append(sample)
        elif self.policy == "FIFO":
            self._items.append(sample)
            if len(self._items) > self.capacity:
                self._items.popleft()
        elif self.policy == "Reservoir":
            self._reservoir(sample)
        else:
            self._hybrid_cbrs(sample)

    def extend(self, samples) -> None:
        for s in samples:
            self.store(s)

    def _reservoir(self, sample: Sample) -> None:
        if len(self._items) < self.capacity:
            self._items.append(sample)
            return
        j = self.rng.integers(self.t_seen)
        if j < self.capacity:
            self._items[j] = sample

    def _hybrid_cbrs(self, sample: Sample) -> None:
        y = sample.label
        self.class_seen[y] = self.class_seen.get(y, 0) + 1
        store_y = self.class_store.setdefault(y, [])
        total = len(self)
        if total < self.capacity:
            store_y.append(sample)
        elif len(self.class_seen) >= self.capacity:
            # global reservoir over all stored samples, agnostic to classes
            j = self.rng.integers(self.t_seen)
            if j < self.capacity:
                victim_class, idx = self._locate(int(self.rng.integers(total)))
                self.class_store[victim_class].pop(idx)
                store_y.append(sample)
        else:
            c_star = self._largest_class(y)
            self.filled.add(c_star)
            if y not in self.filled:
                victims = self.class_store[c_star]
                victims.pop(int(self.rng.integers(len(victims))))
                store_y.append(sample)
            else:
                # per-class reservoir with the class's own observation count
                m_c, n_c = len(store_y), self.class_seen[y]
                if m_c and self.rng.random() < m_c / n_c:
                    store_y[int(self.rng.integers(m_c))] = sample

    def _largest_class(self, incoming: ActionLabel) -> ActionLabel:
        sizes = {c: len(v) for c, v in self.class_store.items()}
        top = max(sizes.values())
        ties = [c for c, n in sizes.items() if n == top]
        if incoming in ties:
            return incoming
        if len(ties) == 1:
            return ties[0]
        return ties[int(self.rng.integers(len(ties)))]

    def _locate(self, flat_index: int) -> tuple[ActionLabel, int]:
        for c, store in self.class_store.items():
            if flat_index < len(store):
                return c, flat_index
            flat_index -= len(store)
        raise IndexError(flat_index)

    def draw(self, k: int) -> list[Sample]:
        """Up to ``k`` stored samples, uniformly without replacement."""
        if k < 0:
            raise ValueError("k must be >= 0")
        items = self.samples()
        k = min(k, len(items))
        if k == 0:
            return []
        idx = self.rng.choice(len(items), size=k, replace=False)
        return [items[i] for i in idx]

    def dump(self, path) -> None:
        """Write stored samples as JSONL followed by a class-count summary record."""
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for s in self.samples():
                fh.write(json.dumps(sample_record(s, "memory")) + "\n")
            counts = {f"{c.verb},{c.noun}": n for c, n in sorted(self.class_counts().items())}
            fh.write(json.dumps({"summary": {"policy": self.policy, "capacity": self.capacity,
                                             "size": len(self), "observed": self.t_seen,
                                             "class_counts": counts}}) + "\n")

"""Fixed-capacity replay memory with reservoir insertion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch


@dataclass(frozen=True)
class ReplayItem:
    image: torch.Tensor  # raw, un-augmented
    label: Optional[int] = None
    task_id: Optional[int] = None
    features: Optional[torch.Tensor] = None  # cached projector output (UCL-DER)
    logits: Optional[torch.Tensor] = None  # cached full-width logits (SCL-DER)


def _frozen_copy(item: ReplayItem) -> ReplayItem:
    def copy(t):
        return None if t is None else t.detach().clone()

    return ReplayItem(copy(item.image), item.label, item.task_id, copy(item.features), copy(item.logits))


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.items: list[ReplayItem] = []
        self.seen_count = 0

    def __len__(self) -> int:
        return len(self.items)

    def is_empty(self) -> bool:
        return not self.items

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "seen_count": self.seen_count,
            "items": [
                {k: v for k, v in vars(item).items() if v is not None} for item in self.items
            ],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> ReplayBuffer:
        buf = cls(int(state["capacity"]))
        buf.seen_count = int(state["seen_count"])
        buf.items = [ReplayItem(**item) for item in state["items"]]
        return buf


def reservoir_insert(buffer: ReplayBuffer, item: ReplayItem, rng: np.random.Generator) -> ReplayBuffer:
    """Offer one item; every offered item is retained with probability capacity / seen."""
    if buffer.seen_count < buffer.capacity:
        buffer.items.append(_frozen_copy(item))
    else:
        # j uniform over the seen_count + 1 items offered so far, this one included
        j = int(rng.integers(0, buffer.seen_count + 1))
        if j < buffer.capacity:
            buffer.items[j] = _frozen_copy(item)
    buffer.seen_count += 1
    return buffer


def uniform_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[ReplayItem]:
    """Draw ``n`` items uniformly with replacement."""
    if buffer.is_empty():
        raise ValueError("cannot sample from an empty replay buffer")
    idx = rng.integers(0, len(buffer.items), size=n)
    return [buffer.items[i] for i in idx]


def stack_field(items: list[ReplayItem], name: str) -> torch.Tensor:
    values = [getattr(it, name) for it in items]
    if any(v is None for v in values):
        raise ValueError(f"replay items lack cached {name!r}")
    if name in ("label", "task_id"):
        return torch.tensor(values, dtype=torch.long)
    return torch.stack(values)

"""Actor-specific token memory.

A dictionary from tracker-assigned actor ID to a ``D``-dim token. Newborn
actors clone the current per-class token; tokens then evolve through
test-time gradient steps while the actor is visible. At a scene transition
the banked tokens are averaged per class and become the per-class tokens of
the next scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .scenario import NUM_CLASSES


@dataclass
class MemoryEntry:
    token: np.ndarray
    cls: int
    last_seen: int
    retired: bool = False


@dataclass
class TokenMemory:
    scene_class_tokens: np.ndarray  # (C, D)
    bank: dict[int, MemoryEntry] = field(default_factory=dict)
    scene_id: int = 0

    @property
    def dim(self) -> int:
        return self.scene_class_tokens.shape[1]

    @classmethod
    def init_from_training(cls, class_tokens: np.ndarray) -> "TokenMemory":
        tokens = np.array(class_tokens, dtype=np.float64, copy=True)
        if tokens.ndim != 2 or tokens.shape[0] != NUM_CLASSES:
            raise ValueError(f"class tokens must be ({NUM_CLASSES}, D), got {tokens.shape}")
        return cls(tokens)

    def lookup_or_register(self, actor_id: int, cls: int, step: int) -> np.ndarray:
        if not 0 <= cls < NUM_CLASSES:
            raise ValueError(f"invalid class {cls}")
        entry = self.bank.get(actor_id)
        if entry is None:
            entry = MemoryEntry(self.scene_class_tokens[cls].copy(), int(cls), step)
            self.bank[actor_id] = entry
        else:
            entry.last_seen = step
        return entry.token

    def tokens_for(self, actor_ids, classes, step: int) -> np.ndarray:
        return np.stack([self.lookup_or_register(int(a), int(c), step)
                         for a, c in zip(actor_ids, classes)]) if len(actor_ids) else \
            np.zeros((0, self.dim))

    def apply_token_gradients(self, grads: Mapping[int, np.ndarray], lr: float) -> None:
        """Gradient step on the listed tokens; retired IDs are skipped."""
        for aid in grads:
            if aid not in self.bank:
                raise KeyError(f"actor {aid} is not banked")
        for aid, g in grads.items():
            entry = self.bank[aid]
            if entry.retired:
                continue
            entry.token = entry.token - lr * np.asarray(g, dtype=np.float64)

    def on_tracker_id_change(self, old_id: int, new_id: int) -> None:
        """The tracker lost ``old_id`` and assigned ``new_id``.

        The old token stays banked (it still counts at the scene transition)
        but is frozen; the new ID registers as a newborn on its next lookup.
        """
        if new_id in self.bank:
            raise ValueError(f"new id {new_id} already banked")
        if old_id in self.bank:
            self.bank[old_id].retired = True

    def scene_transition(self) -> None:
        """Average banked tokens per class, clear the bank and advance the scene."""
        if self.bank:
            classes = np.array([e.cls for e in self.bank.values()])
            tokens = np.stack([e.token for e in self.bank.values()])
            for c in range(NUM_CLASSES):
                sel = classes == c
                if sel.any():
                    self.scene_class_tokens[c] = tokens[sel].mean(axis=0)
        self.bank = {}
        self.scene_id += 1

    def snapshot(self) -> "TokenMemory":
        return TokenMemory(self.scene_class_tokens.copy(),
                           {k: MemoryEntry(e.token.copy(), e.cls, e.last_seen, e.retired)
                            for k, e in self.bank.items()}, self.scene_id)

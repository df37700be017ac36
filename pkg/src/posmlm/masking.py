"""Masking plans for position and text slots.

Structured mode masks ``n ~ U{1,2,3,4}`` of an object's four position slots
(a uniformly random subset of that size) with plain ``[MASK]``. Independent
mode chooses each position slot at a fixed rate and corrupts it the BERT way,
like text slots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import CLOSE, CLS, MASK, OPEN, PAD, DomainError, VocabSpec, group_slots
from .rng import derive_rng


class Action(enum.IntEnum):
    KEEP = 0
    MASK = 1
    RANDOM_REPLACE = 2


STRUCTURED = "structured"
INDEPENDENT = "independent"


@dataclass
class MaskingConfig:
    mode: str = STRUCTURED
    position_rate: float = 0.2  # used by independent mode only
    text_rate: float = 0.15
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # mask / random / unchanged
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (STRUCTURED, INDEPENDENT):
            raise DomainError(f"unknown masking mode {self.mode!r}")
        for name in ("position_rate", "text_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name}={v} outside [0, 1]")
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise DomainError(f"split {self.split} must be three non-negative numbers summing to 1")


@dataclass
class MaskingPlan:
    """Per-slot actions; ``targets[i] >= 0`` marks slot ``i`` as predicted."""

    actions: np.ndarray
    targets: np.ndarray
    replacements: np.ndarray
    rng_seed: int | None = None

    @classmethod
    def empty(cls, length: int, rng_seed: int | None = None) -> "MaskingPlan":
        return cls(
            np.zeros(length, dtype=np.int8),
            np.full(length, -1, dtype=np.int64),
            np.full(length, -1, dtype=np.int64),
            rng_seed,
        )

    @property
    def predicted(self) -> np.ndarray:
        return np.flatnonzero(self.targets >= 0)

    def to_dict(self) -> dict:
        return {
            "actions": self.actions.tolist(),
            "targets": self.targets.tolist(),
            "replacements": self.replacements.tolist(),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskingPlan":
        return cls(
            np.asarray(d["actions"], dtype=np.int8),
            np.asarray(d["targets"], dtype=np.int64),
            np.asarray(d["replacements"], dtype=np.int64),
            d.get("rng_seed"),
        )


def sample_position_masks(groups: Sequence[Sequence[int]], rng: np.random.Generator) -> list[list[int]]:
    """For each 4-slot group, the sorted subset of slots to mask."""
    out = []
    for slots in groups:
        if len(slots) != 4:
            raise DomainError(f"a position group has 4 slots, got {len(slots)}")
        n = int(rng.integers(1, 5))
        pick = np.sort(rng.choice(4, size=n, replace=False))
        out.append([slots[k] for k in pick])
    return out


def _bert_actions(
    slots: np.ndarray, rate: float, split: Sequence[float], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Choose slots at ``rate`` and give each chosen slot an action by ``split``."""
    chosen = slots[rng.random(len(slots)) < rate]
    u = rng.random(len(chosen))
    actions = np.where(
        u < split[0], Action.MASK, np.where(u < split[0] + split[1], Action.RANDOM_REPLACE, Action.KEEP)
    ).astype(np.int8)
    return chosen, actions


def sample_text_masks(
    text_slots: Sequence[int], config: MaskingConfig, rng: np.random.Generator, vocab: VocabSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (chosen slots, their actions, replacement ids or -1)."""
    chosen, actions = _bert_actions(np.asarray(text_slots, dtype=np.int64), config.text_rate, config.split, rng)
    repl = rng.integers(vocab.text_start, vocab.pos_start, size=len(chosen))
    repl = np.where(actions == Action.RANDOM_REPLACE, repl, -1)
    return chosen, actions, repl


def sample_independent_position_masks(
    slots: Sequence[int], rate: float, rng: np.random.Generator, vocab: VocabSpec,
    split: Sequence[float] = (0.8, 0.1, 0.1),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    chosen, actions = _bert_actions(np.asarray(slots, dtype=np.int64), rate, split, rng)
    repl = rng.integers(vocab.pos_start, vocab.size, size=len(chosen))
    repl = np.where(actions == Action.RANDOM_REPLACE, repl, -1)
    return chosen, actions, repl


class MaskingSampler:
    """Owns one RNG; use :meth:`spawn` for independent, reproducible children."""

    def __init__(self, config: MaskingConfig, vocab: VocabSpec, *keys: int | str):
        self.config = config
        self.vocab = vocab
        self.keys = keys
        self.rng = derive_rng(config.seed, *keys)

    def spawn(self, *keys: int | str) -> "MaskingSampler":
        return MaskingSampler(self.config, self.vocab, *self.keys, *keys)

    def plan(self, stream: Sequence[int], mask_text: bool = True, mask_positions: bool = True) -> MaskingPlan:
        cfg, vocab, rng = self.config, self.vocab, self.rng
        plan = MaskingPlan.empty(len(stream), cfg.seed)
        arr = np.asarray(stream, dtype=np.int64)
        if mask_positions:
            groups = [g for g in group_slots(stream) if all(vocab.is_pos(int(arr[i])) for i in g)]
            if cfg.mode == STRUCTURED:
                for masked in sample_position_masks(groups, rng):
                    plan.actions[masked] = Action.MASK
                    plan.targets[masked] = arr[masked]
            else:
                slots = np.array([i for g in groups for i in g], dtype=np.int64)
                chosen, actions, repl = sample_independent_position_masks(slots, cfg.position_rate, rng, vocab,
                                                                           cfg.split)
                plan.actions[chosen] = actions
                plan.targets[chosen] = arr[chosen]
                plan.replacements[chosen] = repl
        if mask_text:
            text_slots = np.flatnonzero((arr >= vocab.text_start) & (arr < vocab.pos_start))
            chosen, actions, repl = sample_text_masks(text_slots, cfg, rng, vocab)
            plan.actions[chosen] = actions
            plan.targets[chosen] = arr[chosen]
            plan.replacements[chosen] = repl
        return plan


_PROTECTED = (CLS, OPEN, CLOSE, PAD)


def apply_plan(stream: Sequence[int], plan: MaskingPlan) -> list[int]:
    if len(plan.actions) != len(stream):
        raise DomainError(f"plan covers {len(plan.actions)} slots, stream has {len(stream)}")
    out = list(stream)
    for i in np.flatnonzero((plan.actions != Action.KEEP) | (plan.targets >= 0)):
        if out[i] in _PROTECTED:
            raise DomainError(f"plan touches protected special token at index {i}")
        act = plan.actions[i]
        if act == Action.MASK:
            out[i] = MASK
        elif act == Action.RANDOM_REPLACE:
            out[i] = int(plan.replacements[i])
    return out


def restore(corrupted: Sequence[int], plan: MaskingPlan) -> list[int]:
    out = list(corrupted)
    for i in plan.predicted:
        out[i] = int(plan.targets[i])
    return out

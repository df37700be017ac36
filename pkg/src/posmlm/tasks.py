"""Synthetic downstream tasks derived from scenes, and batch assembly.

Every task item is a deterministic function of (scene, seed, index), so the
same split always yields the same prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import CLS, OPEN, CLOSE, BBox, VocabSpec, encode_grounded, quantize_box
from .masking import MaskingSampler, apply_plan
from .prompts import (
    NO_RELATION, PromptInstance, RelationCatalog, build_grounding_prompt, build_rec_prompt, build_vcr_prompt,
    build_vqa_prompt, build_vrd_prompt,
)
from .rng import derive_rng
from .scenes import COLORS, SHAPES, SPATIAL, SceneSample, hflip, random_crop, spatial_relation
from .train import Batch, pad_streams, position_targets

VRD_RELATIONS = SPATIAL
VRD_NEAR = 32.0  # pixel distance between centers under which a pair is related
NEGATIVE_RATIO = 3


@dataclass
class Example:
    """One training row: image, (corrupted) stream and its supervision."""

    pixels: np.ndarray
    stream: list[int]
    pos: list[tuple[int, int]] = field(default_factory=list)  # (slot, gold bin)
    text: list[tuple[int, int]] = field(default_factory=list)  # (slot, gold id)
    itm: int | None = None


def collate(examples: Sequence[Example], num_bins: int, alpha: float | None) -> Batch:
    images = np.stack([e.pixels for e in examples]).astype(np.float32) / 255.0
    tokens = pad_streams([e.stream for e in examples])
    pos_index = np.array([(r, s) for r, e in enumerate(examples) for s, _ in e.pos], dtype=np.int64).reshape(-1, 2)
    pos_bins = [b for e in examples for _, b in e.pos]
    text_index = np.array([(r, s) for r, e in enumerate(examples) for s, _ in e.text], dtype=np.int64).reshape(-1, 2)
    text_targets = np.array([t for e in examples for _, t in e.text], dtype=np.int64)
    itm_labels = itm_mask = None
    if any(e.itm is not None for e in examples):
        itm_labels = np.array([e.itm or 0 for e in examples], dtype=np.float64)
        itm_mask = np.array([e.itm is not None for e in examples])
    return Batch(images, tokens, pos_index, position_targets(pos_bins, num_bins, alpha), text_index,
                 text_targets, itm_labels, itm_mask)


# ------------------------------------------------------------------ pretraining


def grounded_caption(sample: SceneSample, vocab: VocabSpec) -> list[int]:
    text = vocab.encode_words(sample.caption)
    return [CLS] + encode_grounded(text, [(o.span[1], o.box) for o in sample.objects], vocab)


def augment(sample: SceneSample, rng: np.random.Generator, crop_scale=(0.7, 1.0),
            flip_prob: float = 0.5, crop_prob: float = 0.5) -> SceneSample:
    if rng.random() < flip_prob:
        sample = hflip(sample)
    if rng.random() < crop_prob:
        sample = random_crop(sample, rng, crop_scale)
    return sample


def pretrain_examples(samples: Sequence[SceneSample], vocab: VocabSpec, sampler: MaskingSampler, seed: int,
                      epoch: int, itm_rate: float, do_augment: bool) -> list[Example]:
    """Masked grounded captions; a fraction ``itm_rate`` gets a mismatched image."""
    out = []
    n = len(samples)
    for i, s in enumerate(samples):
        rng = derive_rng(seed, "pretrain-example", epoch, i)
        if do_augment:
            s = augment(s, rng)
        stream = grounded_caption(s, vocab)
        plan = sampler.spawn(epoch, i).plan(stream)
        corrupted = apply_plan(stream, plan)
        if n > 1 and rng.random() < itm_rate:
            j = int(rng.integers(0, n - 1))
            j += j >= i
            if samples[j].caption != s.caption:
                out.append(Example(samples[j].pixels, corrupted, itm=0))
                continue
        pos, text = [], []
        for slot in plan.predicted:
            tok = int(plan.targets[slot])
            if vocab.is_pos(tok):
                pos.append((int(slot), vocab.bin_of(tok)))
            else:
                text.append((int(slot), tok))
        out.append(Example(s.pixels, corrupted, pos, text, itm=1))
    return out


# ------------------------------------------------------------------ REC


@dataclass
class RecItem:
    prompt: PromptInstance
    gold: BBox
    target: int  # object index in the scene


def rec_item(sample: SceneSample, vocab: VocabSpec, seed: int, relation_prob: float = 0.5,
             epoch: int | None = None) -> RecItem:
    """Expression for one object; training passes ``epoch`` so the target changes between epochs."""
    rng = derive_rng(seed, "rec", sample.index) if epoch is None else derive_rng(seed, "rec", sample.index, epoch)
    k = int(rng.integers(0, len(sample.objects)))
    target = sample.objects[k]
    words = [target.color, target.shape]
    others = [o for j, o in enumerate(sample.objects) if j != k]
    if others and rng.random() < relation_prob:
        other = others[int(rng.integers(0, len(others)))]
        words += spatial_relation(target.box, other.box).split() + [other.color, other.shape]
    prompt = build_rec_prompt(vocab.encode_words(words), 1, vocab)
    return RecItem(prompt, target.box, k)


def rec_example(sample: SceneSample, item: RecItem, vocab: VocabSpec) -> Example:
    bins = quantize_box(item.gold, vocab.num_bins)
    return Example(sample.pixels, item.prompt.stream, list(zip(item.prompt.box_groups[0], bins)))


# ------------------------------------------------------------------ phrase grounding


@dataclass
class GroundItem:
    prompt: PromptInstance
    golds: list[list[BBox]]  # boxes per phrase, merged at evaluation


def ground_item(sample: SceneSample, vocab: VocabSpec) -> GroundItem:
    text = vocab.encode_words(sample.caption)
    prompt = build_grounding_prompt(text, [o.span[1] for o in sample.objects], vocab)
    return GroundItem(prompt, [[o.box] for o in sample.objects])


def ground_example(sample: SceneSample, item: GroundItem, vocab: VocabSpec) -> Example:
    from .metrics import merge_boxes

    pos = []
    for group, golds in zip(item.prompt.box_groups, item.golds):
        pos += list(zip(group, quantize_box(merge_boxes(golds), vocab.num_bins)))
    return Example(sample.pixels, item.prompt.stream, pos)


# ------------------------------------------------------------------ visual relation detection


def vrd_catalog(vocab: VocabSpec) -> RelationCatalog:
    return RelationCatalog.build(list(VRD_RELATIONS), vocab)


def pair_relation(a: BBox, b: BBox, near: float = VRD_NEAR) -> str:
    (ax, ay), (bx, by) = a.center, b.center
    if math.hypot(ax - bx, ay - by) > near:
        return NO_RELATION
    return spatial_relation(a, b)


@dataclass
class VrdItem:
    prompt: PromptInstance
    subject: int
    object: int
    relation: str


def vrd_items(sample: SceneSample, vocab: VocabSpec, catalog: RelationCatalog) -> list[VrdItem]:
    items = []
    for i, s in enumerate(sample.objects):
        for j, o in enumerate(sample.objects):
            if i == j:
                continue
            prompt = build_vrd_prompt(vocab.encode_words([s.color, s.shape]), s.box,
                                      vocab.encode_words([o.color, o.shape]), o.box, catalog.length, vocab)
            items.append(VrdItem(prompt, i, j, pair_relation(s.box, o.box)))
    return items


def vrd_training_items(samples: Sequence[SceneSample], vocab: VocabSpec, catalog: RelationCatalog, seed: int,
                       epoch: int, ratio: int = NEGATIVE_RATIO) -> list[tuple[int, VrdItem]]:
    """All related pairs plus unrelated pairs sampled at ``ratio`` negatives per positive."""
    pos, neg = [], []
    for k, s in enumerate(samples):
        for it in vrd_items(s, vocab, catalog):
            (neg if it.relation == NO_RELATION else pos).append((k, it))
    rng = derive_rng(seed, "vrd-negatives", epoch)
    n_neg = min(len(neg), ratio * len(pos))
    chosen = sorted(rng.choice(len(neg), size=n_neg, replace=False).tolist()) if n_neg else []
    return pos + [neg[c] for c in chosen]


def vrd_example(sample: SceneSample, item: VrdItem, catalog: RelationCatalog) -> Example:
    toks = catalog.tokens[catalog.index(item.relation)]
    return Example(sample.pixels, item.prompt.stream, text=list(zip(item.prompt.text_slots, toks)))


# ------------------------------------------------------------------ VCR-style multiple choice


@dataclass
class VcrItem:
    question: list[int]
    answers: list[list[int]]
    answer_gold: int
    rationales: list[list[int]]  # shared across answers; conditioned through the prompt
    rationale_gold: int


def _grounded(words: Sequence[str], box: BBox, vocab: VocabSpec) -> list[int]:
    return vocab.encode_words(words) + [OPEN] + [vocab.pos_id(b) for b in quantize_box(box, vocab.num_bins)] + [CLOSE]


def vcr_item(sample: SceneSample, vocab: VocabSpec, seed: int) -> VcrItem:
    rng = derive_rng(seed, "vcr", sample.index)
    target = sample.objects[int(rng.integers(0, len(sample.objects)))]
    question = vocab.encode_words("what shape is") + _grounded(["the", "thing"], target.box, vocab) + [
        vocab.word_id("?")]
    shapes = list(SHAPES)
    rng.shuffle(shapes)
    answers = [vocab.encode_words(["a", s]) for s in shapes]
    colors = [c for c in COLORS if c != target.color]
    picks = [colors[c] for c in rng.choice(len(colors), size=3, replace=False)] + [target.color]
    rng.shuffle(picks)
    rationales = [vocab.encode_words(["the", "thing", "is", c]) for c in picks]
    return VcrItem(question, answers, shapes.index(target.shape), rationales, picks.index(target.color))


def vcr_prompt(item: VcrItem, answer: int, rationale: int | None, vocab: VocabSpec, use_itm: bool) -> PromptInstance:
    q = item.question
    if rationale is None:
        return build_vcr_prompt(q, item.answers[answer], vocab, use_itm)
    return build_vcr_prompt(q + item.answers[answer], item.rationales[rationale], vocab, use_itm, rationale=True)


def vcr_examples(sample: SceneSample, item: VcrItem, vocab: VocabSpec, use_itm: bool) -> list[Example]:
    """Every (question, answer) and (question, gold answer, rationale) candidate, labeled."""
    out = []
    yes, no = vocab.word_id("yes"), vocab.word_id("no")
    cands = [(a, None, a == item.answer_gold) for a in range(len(item.answers))]
    cands += [(item.answer_gold, r, r == item.rationale_gold) for r in range(len(item.rationales))]
    for a, r, ok in cands:
        p = vcr_prompt(item, a, r, vocab, use_itm)
        if use_itm:
            out.append(Example(sample.pixels, p.stream, itm=int(ok)))
        else:
            out.append(Example(sample.pixels, p.stream, text=[(p.text_slots[0], yes if ok else no)]))
    return out


# ------------------------------------------------------------------ grounded VQA


def vqa_catalog(vocab: VocabSpec) -> RelationCatalog:
    answers = list(COLORS) + list(SHAPES) + [f"{c} {s}" for c in COLORS for s in SHAPES]
    return RelationCatalog.build(answers, vocab, include_none=False)


@dataclass
class VqaItem:
    prompt: PromptInstance
    answer: str


def vqa_item(sample: SceneSample, vocab: VocabSpec, catalog: RelationCatalog, seed: int,
             grounded: bool = True) -> VqaItem:
    rng = derive_rng(seed, "vqa", sample.index)
    target = sample.objects[int(rng.integers(0, len(sample.objects)))]
    kind = int(rng.integers(0, 3))
    thing = _grounded(["the", "thing"], target.box, vocab) if grounded else vocab.encode_words("the thing")
    if kind == 0:
        q, ans = vocab.encode_words("what color is") + thing, target.color
    elif kind == 1:
        q, ans = vocab.encode_words("what shape is") + thing, target.shape
    else:
        q, ans = vocab.encode_words("what is") + thing, f"{target.color} {target.shape}"
    q = q + [vocab.word_id("?")]
    return VqaItem(build_vqa_prompt(q, catalog.length, vocab), ans)


def vqa_example(sample: SceneSample, item: VqaItem, catalog: RelationCatalog) -> Example:
    toks = catalog.tokens[catalog.index(item.answer)]
    return Example(sample.pixels, item.prompt.stream, text=list(zip(item.prompt.text_slots, toks)))

"""Fill-in-the-blank prompts for downstream tasks and their decoders.

Every builder returns a :class:`PromptInstance`: a token stream starting with
``[CLS]`` plus a decode contract saying which ``[MASK]`` slots are read over
the position vocabulary (box groups) and which over the full vocabulary
(text slots).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec import (
    CLOSE, CLS, MASK, OPEN, BBox, DomainError, VocabSpec, check_stream, dequantize, insert_groups,
    quantize_box,
)

REC = "rec"
GROUND = "ground"
VCR_QA = "vcr_qa"
VCR_QAR = "vcr_qar"
VRD = "vrd"
VQA = "vqa"
TASKS = (REC, GROUND, VCR_QA, VCR_QAR, VRD, VQA)

NO_RELATION = "no relation with"


@dataclass
class PromptInstance:
    stream: list[int]
    task: str
    box_groups: list[list[int]] = field(default_factory=list)
    text_slots: list[int] = field(default_factory=list)
    use_itm: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")


def _mask_groups(stream: Sequence[int]) -> list[list[int]]:
    return [[i + 1, i + 2, i + 3, i + 4] for i, t in enumerate(stream)
            if t == OPEN and all(stream[i + k] == MASK for k in range(1, 5))]


def build_rec_prompt(expression: Sequence[int], head_end: int, vocab: VocabSpec) -> PromptInstance:
    """Insert ``< [MASK]x4 >`` right after the head phrase's last token.

    ``expression`` may already carry delimiter groups for other objects; they
    are kept as they are. ``head_end`` indexes ``expression`` (without ``[CLS]``).
    """
    expr = list(expression)
    if expr and expr[0] == CLS:
        expr = expr[1:]
        head_end -= 1
    if not expr:
        raise DomainError("empty referring expression")
    if not 0 <= head_end < len(expr) or not vocab.is_text(expr[head_end]):
        raise DomainError(f"head span end {head_end} does not index a text token")
    if head_end + 1 < len(expr) and expr[head_end + 1] == OPEN:
        raise DomainError("head phrase is already grounded")
    stream = [CLS] + expr[: head_end + 1] + [OPEN, MASK, MASK, MASK, MASK, CLOSE] + expr[head_end + 1:]
    check_stream(stream, vocab)
    k = head_end + 3  # first mask slot: CLS offset + OPEN
    return PromptInstance(stream, REC, box_groups=[[k, k + 1, k + 2, k + 3]])


def build_grounding_prompt(caption: Sequence[int], span_ends: Sequence[int], vocab: VocabSpec) -> PromptInstance:
    if not span_ends:
        raise DomainError("phrase grounding needs at least one phrase")
    body = insert_groups(list(caption), [(e, [MASK] * 4) for e in span_ends])
    stream = [CLS] + body
    check_stream(stream, vocab)
    return PromptInstance(stream, GROUND, box_groups=_mask_groups(stream))


def argmax_lowest(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Argmax with ties resolved toward the lowest index (``np.argmax`` already does)."""
    return np.argmax(scores, axis=axis)


def decode_box(slot_scores: np.ndarray, image_w: float, image_h: float, num_bins: int) -> BBox:
    """Per-slot argmax over the position bins, mapped to bin centers.

    If the decoded min exceeds the decoded max on an axis the pair is
    swapped, so the result is always a valid box inside the image.
    """
    scores = np.asarray(slot_scores)
    if scores.shape != (4, num_bins):
        raise DomainError(f"expected (4, {num_bins}) slot scores, got {scores.shape}")
    x0, y0, x1, y1 = (int(b) for b in argmax_lowest(scores))
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    return BBox(
        dequantize(x0, image_w, num_bins), dequantize(y0, image_h, num_bins),
        dequantize(x1, image_w, num_bins), dequantize(y1, image_h, num_bins),
        image_w, image_h,
    )


@dataclass(frozen=True)
class RelationCatalog:
    """Candidate relations tokenized and padded to ``length`` slots."""

    names: tuple[str, ...]
    tokens: tuple[tuple[int, ...], ...]
    length: int

    @classmethod
    def build(cls, relations: Sequence[str], vocab: VocabSpec, length: int | None = None,
              include_none: bool = True) -> "RelationCatalog":
        names = list(dict.fromkeys(relations))
        if len(names) != len(relations):
            raise DomainError("duplicate relation strings")
        if include_none and NO_RELATION not in names:
            names.append(NO_RELATION)
        toks = [tuple(vocab.encode_words(r)) for r in names]
        longest = max(len(t) for t in toks)
        if length is None:
            length = longest
        if length < longest:
            raise DomainError(f"slot count {length} shorter than the longest relation ({longest} tokens)")
        return cls(tuple(names), tuple(toks), length)

    def padded(self, k: int, pad: int = MASK) -> list[int]:
        t = list(self.tokens[k])
        return t + [pad] * (self.length - len(t))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.names)


def _grounded_phrase(words: Sequence[int], box: BBox | None, vocab: VocabSpec) -> list[int]:
    if box is None:
        return list(words)
    return list(words) + [OPEN] + [vocab.pos_id(b) for b in quantize_box(box, vocab.num_bins)] + [CLOSE]


def build_vrd_prompt(subject: Sequence[int], subject_box: BBox | None, obj: Sequence[int], obj_box: BBox | None,
                     length: int, vocab: VocabSpec) -> PromptInstance:
    """``[CLS] the s <…> is [MASK]*length the o <…>``."""
    if length < 1:
        raise DomainError("need at least one relation slot")
    the, is_ = vocab.word_id("the"), vocab.word_id("is")
    head = [CLS, the] + _grounded_phrase(subject, subject_box, vocab) + [is_]
    start = len(head)
    stream = head + [MASK] * length + [the] + _grounded_phrase(obj, obj_box, vocab)
    check_stream(stream, vocab)
    return PromptInstance(stream, VRD, text_slots=list(range(start, start + length)))


def score_relation(slot_log_probs: np.ndarray, relation: Sequence[int]) -> float:
    """Mean log-probability of the relation's tokens over its non-padding slots."""
    lp = np.asarray(slot_log_probs)
    n = len(relation)
    if n == 0 or n > len(lp):
        raise DomainError(f"relation of {n} tokens does not fit {len(lp)} slots")
    return float(np.mean([lp[i, tok] for i, tok in enumerate(relation)]))


def score_catalog(slot_log_probs: np.ndarray, catalog: RelationCatalog) -> np.ndarray:
    return np.array([score_relation(slot_log_probs, t) for t in catalog.tokens])


def build_vcr_prompt(question: Sequence[int], answer: Sequence[int], vocab: VocabSpec,
                     use_itm: bool = False, rationale: bool = False) -> PromptInstance:
    """``[CLS] q a answer: [MASK]``; the ITM form drops the ``answer: [MASK]`` tail.

    For rationale selection pass the question with the chosen answer appended
    as ``question`` and the rationale as ``answer``, with ``rationale=True``.
    """
    task = VCR_QAR if rationale else VCR_QA
    q = list(question)
    if q and q[0] == CLS:
        q = q[1:]
    body = [CLS] + q + list(answer)
    if use_itm:
        check_stream(body, vocab)
        return PromptInstance(body, task, use_itm=True)
    stream = body + [vocab.word_id("answer:"), MASK]
    check_stream(stream, vocab)
    return PromptInstance(stream, task, text_slots=[len(stream) - 1])


def yes_score(slot_probs: np.ndarray, vocab: VocabSpec) -> float:
    """P(yes) at the answer slot of a VCR prompt."""
    return float(np.asarray(slot_probs)[vocab.word_id("yes")])


def chain_answer_rationale(answer_scores: Sequence[float],
                           rationale_scores_for: Callable[[int], Sequence[float]]) -> tuple[int, int]:
    """Pick the best answer, then the best rationale given that answer."""
    a = int(argmax_lowest(np.asarray(answer_scores, dtype=float)))
    r = int(argmax_lowest(np.asarray(rationale_scores_for(a), dtype=float)))
    return a, r


def build_vqa_prompt(question: Sequence[int], length: int, vocab: VocabSpec) -> PromptInstance:
    """``[CLS] q answer: [MASK]*length``."""
    if length < 1:
        raise DomainError("need at least one answer slot")
    q = list(question)
    if q and q[0] == CLS:
        q = q[1:]
    stream = [CLS] + q + [vocab.word_id("answer:")]
    start = len(stream)
    stream += [MASK] * length
    check_stream(stream, vocab)
    return PromptInstance(stream, VQA, text_slots=list(range(start, start + length)))


def strip_groups(stream: Sequence[int]) -> list[int]:
    """Drop every delimiter group, giving the ungrounded form of a stream."""
    out, i = [], 0
    while i < len(stream):
        if stream[i] == OPEN:
            i += 6
            continue
        out.append(stream[i])
        i += 1
    return out

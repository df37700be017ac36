"""Discrete position tokens and grounded token streams.

A grounded stream is a flat list of integer ids drawn from one vocabulary
that holds specials, text words and ``M`` position bins in disjoint ranges.
Each grounded object contributes a delimiter group ``< p p p p >`` right
after the last token of its phrase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class DomainError(ValueError):
    """Raised when an argument lies outside the operation's domain."""


class ParseError(ValueError):
    """Raised for malformed grounded streams; ``index`` is the offending slot."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (at index {index})")
        self.index = index


SPECIALS = ("[PAD]", "[CLS]", "[MASK]", "<", ">")
PAD, CLS, MASK, OPEN, CLOSE = range(len(SPECIALS))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    image_w: float
    image_h: float

    def __post_init__(self):
        if self.image_w <= 0 or self.image_h <= 0:
            raise DomainError(f"non-positive image extent {self.image_w}x{self.image_h}")
        if not (0 <= self.x_min <= self.x_max <= self.image_w):
            raise DomainError(f"bad x range {self.x_min}..{self.x_max} in width {self.image_w}")
        if not (0 <= self.y_min <= self.y_max <= self.image_h):
            raise DomainError(f"bad y range {self.y_min}..{self.y_max} in height {self.image_h}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)


@dataclass(frozen=True)
class VocabSpec:
    """Id layout: specials, then text words, then position bins."""

    words: tuple[str, ...]
    num_bins: int

    def __post_init__(self):
        if self.num_bins < 2:
            raise DomainError("need at least two position bins")
        if len(set(self.words)) != len(self.words):
            raise DomainError("duplicate words in text vocabulary")
        clash = set(self.words) & set(SPECIALS)
        if clash:
            raise DomainError(f"text words collide with specials: {sorted(clash)}")

    @property
    def num_specials(self) -> int:
        return len(SPECIALS)

    @property
    def text_vocab_size(self) -> int:
        return len(self.words)

    @property
    def text_start(self) -> int:
        return len(SPECIALS)

    @property
    def pos_start(self) -> int:
        return len(SPECIALS) + len(self.words)

    @property
    def size(self) -> int:
        return self.pos_start + self.num_bins

    def word_id(self, word: str) -> int:
        try:
            return self.text_start + self.words.index(word)
        except ValueError:
            raise DomainError(f"unknown word {word!r}") from None

    def encode_words(self, text: str | Sequence[str]) -> list[int]:
        tokens = text.split() if isinstance(text, str) else text
        return [self.word_id(w) for w in tokens]

    def pos_id(self, bin_: int) -> int:
        if not 0 <= bin_ < self.num_bins:
            raise DomainError(f"bin {bin_} outside [0, {self.num_bins})")
        return self.pos_start + bin_

    def is_text(self, tok: int) -> bool:
        return self.text_start <= tok < self.pos_start

    def is_pos(self, tok: int) -> bool:
        return self.pos_start <= tok < self.size

    def is_special(self, tok: int) -> bool:
        return 0 <= tok < self.text_start

    def bin_of(self, tok: int) -> int:
        if not self.is_pos(tok):
            raise DomainError(f"token {tok} is not a position token")
        return tok - self.pos_start

    def render(self, stream: Iterable[int]) -> str:
        """Human-readable form, e.g. ``red square < 2 5 7 10 >``."""
        out = []
        for tok in stream:
            if self.is_pos(tok):
                out.append(str(tok - self.pos_start))
            elif self.is_text(tok):
                out.append(self.words[tok - self.text_start])
            elif self.is_special(tok):
                out.append(SPECIALS[tok])
            else:
                raise DomainError(f"token id {tok} outside vocabulary of size {self.size}")
        return " ".join(out)


def quantize(coord: float, extent: float, num_bins: int) -> int:
    """Bin index ``floor(M * coord / extent)``; ``coord == extent`` maps to ``M - 1``."""
    if extent <= 0:
        raise DomainError(f"extent must be positive, got {extent}")
    if num_bins < 2:
        raise DomainError(f"need at least two bins, got {num_bins}")
    if not 0 <= coord <= extent:
        raise DomainError(f"coordinate {coord} outside [0, {extent}]")
    return min(int(math.floor(num_bins * coord / extent)), num_bins - 1)


def dequantize(bin_: int, extent: float, num_bins: int) -> float:
    """Center of bin ``bin_`` in pixel units."""
    if not 0 <= bin_ < num_bins:
        raise DomainError(f"bin {bin_} outside [0, {num_bins})")
    return (bin_ + 0.5) * extent / num_bins


def quantize_box(box: BBox, num_bins: int) -> tuple[int, int, int, int]:
    return (
        quantize(box.x_min, box.image_w, num_bins),
        quantize(box.y_min, box.image_h, num_bins),
        quantize(box.x_max, box.image_w, num_bins),
        quantize(box.y_max, box.image_h, num_bins),
    )


def dequantize_box(bins: Sequence[int], image_w: float, image_h: float, num_bins: int) -> BBox:
    x0, y0, x1, y1 = bins
    return BBox(
        dequantize(x0, image_w, num_bins),
        dequantize(y0, image_h, num_bins),
        dequantize(x1, image_w, num_bins),
        dequantize(y1, image_h, num_bins),
        image_w,
        image_h,
    )


@dataclass(frozen=True)
class GroundedObject:
    span_end: int  # index of the phrase's last token in the text-only sequence
    bins: tuple[int, int, int, int]


def _check_span_ends(span_ends: Sequence[int], text_len: int) -> None:
    prev = -1
    for end in span_ends:
        if not 0 <= end < text_len:
            raise DomainError(f"span end {end} outside text of length {text_len}")
        if end <= prev:
            raise DomainError(f"span ends must be strictly increasing, got {list(span_ends)}")
        prev = end


def insert_groups(text_tokens: Sequence[int], groups: Sequence[tuple[int, Sequence[int]]]) -> list[int]:
    """Insert ``< g0 g1 g2 g3 >`` after each span end; groups are (span_end, 4 ids)."""
    _check_span_ends([end for end, _ in groups], len(text_tokens))
    by_end = {end: list(ids) for end, ids in groups}
    out: list[int] = []
    for i, tok in enumerate(text_tokens):
        out.append(tok)
        if i in by_end:
            ids = by_end[i]
            if len(ids) != 4:
                raise DomainError(f"a delimiter group needs 4 slots, got {len(ids)}")
            out.append(OPEN)
            out.extend(ids)
            out.append(CLOSE)
    return out


def encode_grounded(
    text_tokens: Sequence[int],
    objects: Sequence[tuple[int, BBox]],
    vocab: VocabSpec,
) -> list[int]:
    """Place each object's quantized box after the last token of its phrase."""
    groups = [(end, [vocab.pos_id(b) for b in quantize_box(box, vocab.num_bins)]) for end, box in objects]
    return insert_groups(text_tokens, groups)


def parse_grounded(stream: Sequence[int], vocab: VocabSpec) -> tuple[list[int], list[GroundedObject]]:
    """Split a stream back into text tokens and grounded objects.

    A leading ``[CLS]`` and trailing ``[PAD]`` slots are ignored.
    """
    text: list[int] = []
    objects: list[GroundedObject] = []
    n = len(stream)
    while n and stream[n - 1] == PAD:
        n -= 1
    i = 1 if n and stream[0] == CLS else 0
    while i < n:
        tok = stream[i]
        if tok == OPEN:
            if not text:
                raise ParseError("delimiter group with no preceding text token", i)
            if objects and objects[-1].span_end == len(text) - 1:
                raise ParseError("two delimiter groups after the same token", i)
            bins = []
            for k in range(1, 5):
                j = i + k
                if j >= n:
                    raise ParseError("unterminated delimiter group", i)
                t = stream[j]
                if t == OPEN:
                    raise ParseError("nested delimiter group", j)
                if t == MASK:
                    raise ParseError("[MASK] inside a group; stream is not fully grounded", j)
                if not vocab.is_pos(t):
                    raise ParseError(f"expected a position token, found {t}", j)
                bins.append(vocab.bin_of(t))
            if i + 5 >= n or stream[i + 5] != CLOSE:
                raise ParseError("delimiter group does not close after four positions", i + 5 if i + 5 < n else i)
            objects.append(GroundedObject(len(text) - 1, tuple(bins)))
            i += 6
        elif tok == CLOSE:
            raise ParseError("unmatched closing delimiter", i)
        elif vocab.is_pos(tok):
            raise ParseError("position token outside a delimiter group", i)
        elif vocab.is_text(tok):
            text.append(tok)
            i += 1
        else:
            raise ParseError(f"unexpected token {tok}", i)
    return text, objects


def group_slots(stream: Sequence[int]) -> list[list[int]]:
    """Indices of the four inner slots of every delimiter group, in order."""
    groups = []
    for i, tok in enumerate(stream):
        if tok == OPEN:
            groups.append([i + 1, i + 2, i + 3, i + 4])
    return groups


def check_stream(stream: Sequence[int], vocab: VocabSpec) -> None:
    """Validate delimiter well-formedness; ``[MASK]`` is allowed anywhere."""
    n = len(stream)
    i = 0
    while i < n:
        tok = stream[i]
        if not 0 <= tok < vocab.size:
            raise ParseError(f"token id {tok} outside vocabulary", i)
        if tok == OPEN:
            for k in range(1, 5):
                j = i + k
                if j >= n or not (stream[j] == MASK or vocab.is_pos(stream[j])):
                    raise ParseError("delimiter group needs four position or [MASK] slots", min(j, n - 1))
            if i + 5 >= n or stream[i + 5] != CLOSE:
                raise ParseError("delimiter group does not close after four slots", i)
            i += 6
            continue
        if tok == CLOSE:
            raise ParseError("unmatched closing delimiter", i)
        if vocab.is_pos(tok):
            raise ParseError("position token outside a delimiter group", i)
        i += 1

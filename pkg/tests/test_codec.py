import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posmlm.codec import (
    CLOSE, CLS, MASK, OPEN, PAD, BBox, DomainError, ParseError, VocabSpec, check_stream, dequantize,
    dequantize_box, encode_grounded, group_slots, parse_grounded, quantize, quantize_box,
)

VOCAB = VocabSpec(("the", "red", "blue", "square", "circle", "left", "of"), 16)


def ids(words):
    return VOCAB.encode_words(words)


# ------------------------------------------------------------------ quantize / dequantize


@pytest.mark.parametrize("coord,extent,M,expected", [
    (0, 640, 512, 0),
    (320, 640, 512, 256),
    (640, 640, 512, 511),
    (63.999, 64, 16, 15),
    (4.0, 64, 16, 1),
])
def test_quantize_examples(coord, extent, M, expected):
    assert quantize(coord, extent, M) == expected


@pytest.mark.parametrize("coord,extent,M", [(-0.1, 64, 16), (64.1, 64, 16), (1, 0, 16), (1, -3, 16), (1, 64, 1)])
def test_quantize_domain_errors(coord, extent, M):
    with pytest.raises(DomainError):
        quantize(coord, extent, M)


def test_dequantize_examples():
    assert dequantize(256, 640, 512) == 320.625
    assert dequantize(0, 512, 512) == 0.5
    with pytest.raises(DomainError):
        dequantize(16, 64, 16)


def test_round_trip_every_bin():
    for M in (2, 16, 512):
        for p in range(M):
            assert quantize(dequantize(p, 640, M), 640, M) == p


@given(st.floats(0, 1), st.floats(1, 5000), st.integers(2, 600))
def test_dequantize_error_at_most_half_bin(frac, extent, M):
    c = frac * extent
    assert abs(dequantize(quantize(c, extent, M), extent, M) - c) <= extent / (2 * M) + 1e-9 * extent


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 2000), st.integers(2, 600))
def test_quantize_monotone(a, b, extent, M):
    lo, hi = sorted((a * extent, b * extent))
    assert quantize(lo, extent, M) <= quantize(hi, extent, M)


def test_quantize_box_examples():
    assert quantize_box(BBox(0, 0, 64, 48, 64, 48), 512) == (0, 0, 511, 511)
    assert quantize_box(BBox(32, 32, 32, 32, 64, 64), 16) == (8, 8, 8, 8)
    # floor(16 * c / 64) per coordinate, by hand: 10->2, 20->5, 30->7, 40->10
    assert quantize_box(BBox(10, 20, 30, 40, 64, 64), 16) == (2, 5, 7, 10)


def test_dequantize_box_uses_bin_centers():
    b = dequantize_box((2, 5, 7, 10), 64, 64, 16)
    assert b.coords == (10.0, 22.0, 30.0, 42.0)


def test_bbox_invariants():
    with pytest.raises(DomainError):
        BBox(5, 0, 4, 1, 10, 10)
    with pytest.raises(DomainError):
        BBox(0, 0, 11, 1, 10, 10)
    with pytest.raises(DomainError):
        BBox(0, 0, 1, 1, 0, 10)
    assert BBox(3, 3, 3, 3, 10, 10).area == 0


# ------------------------------------------------------------------ vocabulary


def test_vocab_ranges_are_disjoint_and_cover_everything():
    v = VOCAB
    assert v.size == v.num_specials + v.text_vocab_size + v.num_bins
    kinds = [(v.is_special(t), v.is_text(t), v.is_pos(t)) for t in range(v.size)]
    assert all(sum(k) == 1 for k in kinds)
    assert [PAD, CLS, MASK, OPEN, CLOSE] == list(range(5))


def test_vocab_rejects_duplicates_and_special_clash():
    with pytest.raises(DomainError):
        VocabSpec(("a", "a"), 4)
    with pytest.raises(DomainError):
        VocabSpec(("a", "<"), 4)
    with pytest.raises(DomainError):
        VocabSpec(("a",), 1)


def test_render():
    stream = encode_grounded(ids("red square".split()), [(1, BBox(10, 20, 30, 40, 64, 64))], VOCAB)
    assert VOCAB.render(stream) == "red square < 2 5 7 10 >"


# ------------------------------------------------------------------ grounded streams


def test_encode_places_group_after_phrase():
    box = BBox(10, 20, 30, 40, 64, 64)
    text = ids(["the", "red", "square"])
    stream = encode_grounded(text, [(2, box)], VOCAB)
    assert stream == text + [OPEN] + [VOCAB.pos_id(b) for b in (2, 5, 7, 10)] + [CLOSE]


def test_encode_zero_objects_is_identity():
    text = ids(["the", "red", "square"])
    assert encode_grounded(text, [], VOCAB) == text


def test_encode_rejects_bad_span_ends():
    box = BBox(0, 0, 1, 1, 64, 64)
    text = ids(["red", "square", "blue", "circle"])
    with pytest.raises(DomainError):
        encode_grounded(text, [(1, box), (1, box)], VOCAB)
    with pytest.raises(DomainError):
        encode_grounded(text, [(3, box), (1, box)], VOCAB)
    with pytest.raises(DomainError):
        encode_grounded(text, [(4, box)], VOCAB)


def test_two_objects_round_trip():
    a, b = BBox(1, 2, 3, 4, 64, 64), BBox(40, 41, 60, 63, 64, 64)
    text = ids(["red", "square", "left", "of", "blue", "circle"])
    stream = encode_grounded(text, [(1, a), (5, b)], VOCAB)
    assert len(group_slots(stream)) == 2
    back_text, objs = parse_grounded(stream, VOCAB)
    assert back_text == text
    assert [o.span_end for o in objs] == [1, 5]
    assert [o.bins for o in objs] == [quantize_box(a, 16), quantize_box(b, 16)]


def test_parse_skips_cls_and_padding():
    text = ids(["red", "square"])
    stream = [CLS] + encode_grounded(text, [(1, BBox(0, 0, 8, 8, 64, 64))], VOCAB) + [PAD, PAD]
    back, objs = parse_grounded(stream, VOCAB)
    assert back == text and len(objs) == 1


def _group(bins):
    return [OPEN] + [VOCAB.pos_id(b) for b in bins] + [CLOSE]


@pytest.mark.parametrize("stream,index", [
    (ids(["red"]) + [OPEN, 22, 23, 24, CLOSE], 5),  # three positions then close
    (ids(["red"]) + [OPEN, 22, OPEN, 23, 24, 25, CLOSE], 3),  # nested
    (ids(["red"]) + [OPEN, 22, MASK, 23, 24, CLOSE], 3),  # mask not allowed here
    (ids(["red"]) + [CLOSE], 1),
    (ids(["red"]) + [22], 1),  # bare position token
    ([OPEN, 22, 23, 24, 25, CLOSE], 0),  # no phrase before the group
])
def test_parse_errors_name_the_index(stream, index):
    with pytest.raises(ParseError) as e:
        parse_grounded(stream, VOCAB)
    assert e.value.index == index


def test_parse_rejects_two_groups_after_one_token():
    stream = ids(["red"]) + _group((1, 2, 3, 4)) + _group((1, 2, 3, 4))
    with pytest.raises(ParseError):
        parse_grounded(stream, VOCAB)


def test_check_stream_allows_masks_in_groups():
    check_stream(ids(["red"]) + [OPEN, MASK, MASK, VOCAB.pos_id(3), MASK, CLOSE], VOCAB)
    with pytest.raises(ParseError):
        check_stream(ids(["red"]) + [OPEN, MASK, MASK, CLOSE], VOCAB)


@st.composite
def grounded_inputs(draw):
    n_words = draw(st.integers(1, 12))
    text = draw(st.lists(st.integers(VOCAB.text_start, VOCAB.pos_start - 1), min_size=n_words, max_size=n_words))
    ends = sorted(draw(st.sets(st.integers(0, n_words - 1), max_size=n_words)))
    w = draw(st.floats(1, 1000))
    h = draw(st.floats(1, 1000))
    objects = []
    for e in ends:
        xs = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
        ys = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
        objects.append((e, BBox(xs[0] * w, ys[0] * h, xs[1] * w, ys[1] * h, w, h)))
    return text, objects


@settings(max_examples=200)
@given(grounded_inputs())
def test_parse_inverts_encode(data):
    text, objects = data
    stream = encode_grounded(text, objects, VOCAB)
    check_stream(stream, VOCAB)
    back, objs = parse_grounded(stream, VOCAB)
    assert back == text
    assert [(o.span_end, o.bins) for o in objs] == [(e, quantize_box(b, VOCAB.num_bins)) for e, b in objects]
    for o, (_, b) in zip(objs, objects):
        d = dequantize_box(o.bins, b.image_w, b.image_h, VOCAB.num_bins)
        half = max(b.image_w, b.image_h) / (2 * VOCAB.num_bins)
        assert all(math.isclose(x, y, abs_tol=half + 1e-9) or abs(x - y) <= half + 1e-9
                   for x, y in zip(d.coords, b.coords))

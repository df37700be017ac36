from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posmlm.codec import CLOSE, CLS, MASK, OPEN, PAD, BBox, DomainError, check_stream, encode_grounded
from posmlm.masking import (
    INDEPENDENT, STRUCTURED, Action, MaskingConfig, MaskingPlan, MaskingSampler, apply_plan, restore,
    sample_independent_position_masks, sample_position_masks, sample_text_masks,
)
from posmlm.rng import derive_rng
from posmlm.scenes import default_vocab

VOCAB = default_vocab(16)


def caption_stream(n_objects=2):
    words = []
    objs = []
    for k in range(n_objects):
        words += ["red", "square"] if k % 2 == 0 else ["blue", "circle"]
        objs.append((len(words) - 1, BBox(4 * k, 8, 4 * k + 20, 30, 64, 64)))
        if k < n_objects - 1:
            words.append("and")
    return [CLS] + encode_grounded(VOCAB.encode_words(words), objs, VOCAB)


def test_config_validation():
    with pytest.raises(DomainError):
        MaskingConfig(mode="nope")
    with pytest.raises(DomainError):
        MaskingConfig(text_rate=1.5)
    with pytest.raises(DomainError):
        MaskingConfig(split=(0.5, 0.5, 0.5))


def test_structured_count_distribution_and_marginal():
    rng = derive_rng(0, "test-structured")
    groups = [[1, 2, 3, 4]] * 100_000
    picks = sample_position_masks(groups, rng)
    counts = Counter(len(p) for p in picks)
    for n in (1, 2, 3, 4):
        assert counts[n] / 1e5 == pytest.approx(0.25, abs=0.005)
    slot_hits = Counter(s for p in picks for s in p)
    for s in (1, 2, 3, 4):
        assert slot_hits[s] / 1e5 == pytest.approx(0.625, abs=0.005)
    assert sum(len(p) for p in picks) / 1e5 == pytest.approx(2.5, abs=0.02)
    # chi-square against uniform over {1,2,3,4}, 3 dof; 11.34 is the 0.01 critical value
    chi2 = sum((counts[n] - 25_000) ** 2 / 25_000 for n in (1, 2, 3, 4))
    assert chi2 < 11.34


def test_structured_subsets_are_all_reachable():
    rng = derive_rng(1, "subsets")
    seen = {tuple(p) for p in sample_position_masks([[0, 1, 2, 3]] * 5000, rng)}
    assert len(seen) == 15


def test_text_masking_rates_and_vocab():
    rng = derive_rng(2, "text")
    cfg = MaskingConfig()
    slots = np.arange(1_000_000)
    chosen, actions, repl = sample_text_masks(slots, cfg, rng, VOCAB)
    assert len(chosen) / 1e6 == pytest.approx(0.15, abs=0.002)
    frac = np.bincount(actions, minlength=3) / len(actions)
    assert frac[Action.MASK] == pytest.approx(0.8, abs=0.005)
    assert frac[Action.RANDOM_REPLACE] == pytest.approx(0.1, abs=0.005)
    assert frac[Action.KEEP] == pytest.approx(0.1, abs=0.005)
    r = repl[actions == Action.RANDOM_REPLACE]
    assert ((r >= VOCAB.text_start) & (r < VOCAB.pos_start)).all()
    assert (repl[actions != Action.RANDOM_REPLACE] == -1).all()


def test_independent_position_masks():
    rng = derive_rng(3, "independent")
    chosen, actions, repl = sample_independent_position_masks(np.arange(1_000_000), 0.2, rng, VOCAB)
    assert len(chosen) / 1e6 == pytest.approx(0.2, abs=0.002)
    r = repl[actions == Action.RANDOM_REPLACE]
    assert ((r >= VOCAB.pos_start) & (r < VOCAB.size)).all()
    assert len(sample_independent_position_masks(np.arange(100), 0.0, rng, VOCAB)[0]) == 0
    assert len(sample_independent_position_masks(np.arange(100), 1.0, rng, VOCAB)[0]) == 100


def test_plan_is_deterministic():
    stream = caption_stream(3)
    a = MaskingSampler(MaskingConfig(seed=5), VOCAB, "x").spawn(1).plan(stream)
    b = MaskingSampler(MaskingConfig(seed=5), VOCAB, "x").spawn(1).plan(stream)
    assert a.to_dict() == b.to_dict()
    c = MaskingSampler(MaskingConfig(seed=6), VOCAB, "x").spawn(1).plan(stream)
    d = MaskingSampler(MaskingConfig(seed=5), VOCAB, "x").spawn(2).plan(stream)
    assert a.to_dict() != c.to_dict() or a.to_dict() != d.to_dict()


def test_plan_serialization_round_trip():
    plan = MaskingSampler(MaskingConfig(), VOCAB).plan(caption_stream())
    back = MaskingPlan.from_dict(plan.to_dict())
    assert back.to_dict() == plan.to_dict()


def test_structured_plan_only_masks_positions():
    stream = caption_stream(3)
    sampler = MaskingSampler(MaskingConfig(mode=STRUCTURED), VOCAB)
    for i in range(200):
        plan = sampler.spawn(i).plan(stream, mask_text=False)
        for slot in np.flatnonzero(plan.actions != Action.KEEP):
            assert VOCAB.is_pos(stream[slot])
            assert plan.actions[slot] == Action.MASK
        assert all(VOCAB.is_pos(stream[s]) for s in plan.predicted)


def test_empty_plan_is_identity_and_full_group_mask_renders():
    stream = caption_stream(1)
    assert apply_plan(stream, MaskingPlan.empty(len(stream))) == stream
    plan = MaskingPlan.empty(len(stream))
    first = stream.index(OPEN) + 1
    for s in range(first, first + 4):
        plan.actions[s] = Action.MASK
        plan.targets[s] = stream[s]
    out = apply_plan(stream, plan)
    assert VOCAB.render(out[first - 1:first + 5]) == "< [MASK] [MASK] [MASK] [MASK] >"


@pytest.mark.parametrize("protected", [CLS, OPEN, CLOSE])
def test_apply_plan_refuses_protected_slots(protected):
    stream = caption_stream(1)
    plan = MaskingPlan.empty(len(stream))
    idx = stream.index(protected)
    plan.actions[idx] = Action.MASK
    plan.targets[idx] = stream[idx]
    with pytest.raises(DomainError):
        apply_plan(stream, plan)


def test_apply_plan_length_mismatch():
    with pytest.raises(DomainError):
        apply_plan([CLS, 7], MaskingPlan.empty(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000), st.sampled_from([STRUCTURED, INDEPENDENT]),
       st.floats(0, 1))
def test_plan_properties(n_objects, seed, mode, rate):
    stream = caption_stream(n_objects) + [PAD, PAD]
    cfg = MaskingConfig(mode=mode, position_rate=rate, seed=seed)
    plan = MaskingSampler(cfg, VOCAB).plan(stream)
    out = apply_plan(stream, plan)
    for i, (a, b) in enumerate(zip(stream, out)):
        if a in (CLS, OPEN, CLOSE, PAD):
            assert a == b
    if mode == STRUCTURED:
        for i in np.flatnonzero(plan.actions == Action.RANDOM_REPLACE):
            assert VOCAB.is_text(stream[i])
    assert restore(out, plan) == stream
    check_stream(out[1:out.index(PAD)], VOCAB)
    for i in plan.predicted:
        assert plan.targets[i] == stream[i]
        if out[i] == MASK:
            assert plan.actions[i] == Action.MASK

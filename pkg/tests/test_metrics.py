import json
import random
from fractions import Fraction

import pytest
from oracles import (
    fraction_iou, oracle_mean_recall, oracle_recall, rand_int_box, random_images, raster_iou, raster_merge,
)

from posmlm.codec import BBox, DomainError
from posmlm.metrics import (
    EvalReport, acc_at_05, chained_accuracy, choice_accuracy, evaluate_dump, iou, mean_recall_at_k, merge_boxes,
    per_class_recall_at_k, rank_triplets, read_dump, recall_at_k, write_dump,
)


# ------------------------------------------------------------------ box metrics


def test_iou_examples():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edges
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0  # zero area
    assert iou(BBox(0, 0, 2, 2, 8, 8), (1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_matches_raster_and_rational_oracles():
    rng = random.Random(0)
    for _ in range(100):
        a, b = rand_int_box(rng), rand_int_box(rng)
        assert iou(a, b) == pytest.approx(float(raster_iou(a, b)), abs=1e-12)
        assert iou(a, b) == iou(b, a)
    for _ in range(100):
        a = sorted(rng.uniform(0, 20) for _ in range(2)) + sorted(rng.uniform(0, 20) for _ in range(2))
        b = sorted(rng.uniform(0, 20) for _ in range(2)) + sorted(rng.uniform(0, 20) for _ in range(2))
        a, b = (a[0], a[2], a[1], a[3]), (b[0], b[2], b[1], b[3])
        assert iou(a, b) == pytest.approx(float(fraction_iou(a, b)), abs=1e-12)


def test_accuracy_threshold_is_strict():
    # IoU exactly 1/2: gold 2x2, prediction 2x1 inside it
    assert iou((0, 0, 2, 1), (0, 0, 2, 2)) == 0.5
    assert acc_at_05([(0, 0, 2, 1)], [(0, 0, 2, 2)]) == 0.0
    assert acc_at_05([(0, 0, 2, 1.01)], [(0, 0, 2, 2)]) == 1.0
    with pytest.raises(DomainError):
        acc_at_05([], [])
    with pytest.raises(DomainError):
        acc_at_05([(0, 0, 1, 1)], [])


def test_accuracy_matches_oracle():
    rng = random.Random(1)
    for _ in range(100):
        n = rng.randrange(1, 21)
        preds = [rand_int_box(rng) for _ in range(n)]
        golds = [rand_int_box(rng) for _ in range(n)]
        want = Fraction(sum(raster_iou(p, g) > Fraction(1, 2) for p, g in zip(preds, golds)), n)
        assert acc_at_05(preds, golds) == pytest.approx(float(want), abs=1e-12)


def test_merge_boxes():
    assert merge_boxes([(0, 0, 2, 2), (5, 1, 6, 9)]) == (0, 0, 6, 9)
    m = merge_boxes([BBox(1, 1, 2, 2, 10, 10), BBox(3, 0, 4, 5, 10, 10)])
    assert isinstance(m, BBox) and m.coords == (1, 0, 4, 5)
    with pytest.raises(DomainError):
        merge_boxes([])
    rng = random.Random(2)
    for _ in range(100):
        boxes = [rand_int_box(rng) for _ in range(rng.randrange(1, 21))]
        assert tuple(merge_boxes(boxes)) == tuple(int(v) for v in raster_merge(boxes))


# ------------------------------------------------------------------ relation recall


def test_recall_small_example():
    preds = [(0, "on", 1, 0.9), (1, "on", 0, 0.8), (0, "above", 2, 0.7)]
    golds = [(0, "above", 2), (1, "on", 0)]
    assert recall_at_k([(preds, golds)], 1) == 0.0
    assert recall_at_k([(preds, golds)], 2) == 0.5
    assert recall_at_k([(preds, golds)], 3) == 1.0
    pc = per_class_recall_at_k([(preds, golds)], 2)
    assert pc == {"above": 0.0, "on": 1.0}
    assert mean_recall_at_k(pc) == 0.5


def test_recall_skips_images_without_gold():
    images = [([(0, "on", 1, 0.5)], [(0, "on", 1)]), ([(0, "on", 1, 0.5)], [])]
    assert recall_at_k(images, 1) == 1.0
    with pytest.raises(DomainError):
        recall_at_k([([], [])], 5)
    with pytest.raises(DomainError):
        mean_recall_at_k({})


def test_recall_and_mean_recall_match_oracles():
    rng = random.Random(3)
    for _ in range(100):
        images = random_images(rng, rng.randrange(1, 8))
        if not any(g for _, g in images):
            continue
        for k in (1, 3, 20):
            assert recall_at_k(images, k) == pytest.approx(float(oracle_recall(images, k)), abs=1e-12)
            got = mean_recall_at_k(per_class_recall_at_k(images, k))
            assert got == pytest.approx(float(oracle_mean_recall(images, k)), abs=1e-12)


def test_recall_is_monotone_in_k():
    rng = random.Random(4)
    for _ in range(50):
        images = random_images(rng, 4)
        if not any(g for _, g in images):
            continue
        vals = [recall_at_k(images, k) for k in range(1, 22)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(float(oracle_recall(images, 10_000)))


def test_tie_break_follows_subject_relation_object():
    preds = [(1, "on", 0, 0.5), (0, "riding", 1, 0.5), (0, "on", 1, 0.5)]
    ranked = rank_triplets(preds, {"on": 0, "riding": 1})
    assert [t[:3] for t in ranked] == [(0, "on", 1), (0, "riding", 1), (1, "on", 0)]
    ranked = rank_triplets(preds, {"riding": 0, "on": 1})
    assert [t[:3] for t in ranked] == [(0, "riding", 1), (0, "on", 1), (1, "on", 0)]


# ------------------------------------------------------------------ choice accuracy


def test_choice_and_chained_accuracy():
    assert choice_accuracy([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5
    assert chained_accuracy([0, 1, 2], [0, 1, 2], [3, 0, 1], [3, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(DomainError):
        choice_accuracy([], [])
    with pytest.raises(DomainError):
        chained_accuracy([0], [0], [0, 1], [0])


def test_choice_accuracy_matches_oracle():
    rng = random.Random(5)
    for _ in range(100):
        n = rng.randrange(1, 21)
        pa, ga = [rng.randrange(4) for _ in range(n)], [rng.randrange(4) for _ in range(n)]
        pr, gr = [rng.randrange(4) for _ in range(n)], [rng.randrange(4) for _ in range(n)]
        assert choice_accuracy(pa, ga) == pytest.approx(float(Fraction(sum(a == b for a, b in zip(pa, ga)), n)),
                                                        abs=1e-12)
        both = Fraction(sum(a == b and c == d for a, b, c, d in zip(pa, ga, pr, gr)), n)
        assert chained_accuracy(pa, ga, pr, gr) == pytest.approx(float(both), abs=1e-12)
        assert chained_accuracy(pa, ga, pr, gr) <= min(choice_accuracy(pa, ga), choice_accuracy(pr, gr))


# ------------------------------------------------------------------ dumps


def test_rec_dump_report(tmp_path):
    recs = [{"task": "rec", "id": 0, "pred": [0, 0, 2, 2], "gold": [0, 0, 2, 2], "image_w": 8, "image_h": 8},
            {"task": "rec", "id": 1, "pred": [0, 0, 2, 1], "gold": [0, 0, 2, 2], "image_w": 8, "image_h": 8}]
    write_dump(tmp_path / "d.jsonl", recs)
    rep = evaluate_dump(read_dump(tmp_path / "d.jsonl"), "abc")
    assert rep.metrics["acc@0.5"] == 0.5 and rep.metrics["mean_iou"] == 0.75
    assert rep.count == 2 and rep.config_digest == "abc"
    assert "acc@0.5" in rep.table()
    json.dumps(rep.to_record())


def test_zero_area_gold_is_flagged():
    rep = evaluate_dump([{"task": "rec", "pred": [0, 0, 1, 1], "gold": [1, 1, 1, 1]}])
    assert rep.metrics["acc@0.5"] == 0.0 and rep.flags


def test_ground_vrd_vcr_vqa_dumps():
    g = evaluate_dump([{"task": "ground", "pred": [[0, 0, 4, 4]], "gold": [[[0, 0, 2, 4], [2, 0, 4, 4]]]}])
    assert g.metrics["acc@0.5"] == 1.0
    v = evaluate_dump([{"task": "vrd", "id": 0, "predictions": [[0, "on", 1, 0.9]], "gold": [[0, "on", 1]],
                        "catalog": ["on"]}])
    assert v.metrics["R@50"] == 1.0 and v.metrics["mR@100"] == 1.0
    c = evaluate_dump([{"task": "vcr", "answer_scores": [0.1, 0.9, 0, 0], "answer_gold": 1,
                        "rationale_scores_gold": [1, 0, 0, 0], "rationale_scores_pred": [0, 1, 0, 0],
                        "rationale_gold": 0}])
    assert c.metrics == {"Q->A": 1.0, "QA->R": 1.0, "Q->AR": 0.0}
    q = evaluate_dump([{"task": "vqa", "pred": "red", "gold": "red", "scores": [0.1]},
                       {"task": "vqa", "pred": "red", "gold": "blue", "scores": [0.1]}])
    assert q.metrics["accuracy"] == 0.5


def test_malformed_dumps(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"task": "rec"\n')
    with pytest.raises(DomainError):
        read_dump(p)
    p.write_text("")
    with pytest.raises(DomainError):
        read_dump(p)
    p.write_text('{"pred": 1}\n')
    with pytest.raises(DomainError):
        read_dump(p)
    with pytest.raises(DomainError):
        evaluate_dump([{"task": "rec", "pred": [0, 0, 1, 1]}])
    with pytest.raises(DomainError):
        evaluate_dump([{"task": "rec", "pred": [0, 0, 1, 1], "gold": [0, 0, 1, 1]}, {"task": "vqa"}])
    with pytest.raises(DomainError):
        evaluate_dump([{"task": "caption"}])
    with pytest.raises(DomainError):
        evaluate_dump([{"task": "ground", "pred": [], "gold": [[[0, 0, 1, 1]]]}])


def test_report_validation():
    with pytest.raises(DomainError):
        EvalReport("rec", {"acc@0.5": 1.5}, 3)
    with pytest.raises(DomainError):
        EvalReport("rec", {"acc@0.5": 0.5}, 0)

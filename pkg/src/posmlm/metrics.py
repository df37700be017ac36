"""Evaluation protocols: box accuracy, relation recall and multiple choice.

Prediction dumps are JSON lines, one record per instance, each with a
``task`` field:

* ``rec``: ``pred`` and ``gold`` boxes as ``[x_min, y_min, x_max, y_max]``,
  plus ``image_w``/``image_h``.
* ``ground``: ``pred`` is one box per phrase, ``gold`` a list of boxes per
  phrase (merged by their union before scoring).
* ``vrd``: ``id`` of the image, ``predictions`` as ``[subj, relation, obj,
  score]`` rows (one per pair predicted to have an edge) and ``gold`` as
  ``[subj, relation, obj]`` rows.
* ``vcr``: ``answer_scores``, ``answer_gold``, ``rationale_scores_gold``
  (rationales scored given the gold answer), ``rationale_scores_pred``
  (given the predicted answer) and ``rationale_gold``.
* ``vqa``: ``pred`` and ``gold`` answer strings with per-candidate ``scores``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import BBox, DomainError


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    count: int
    config_digest: str = ""
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.count <= 0:
            raise DomainError("an evaluation report needs at least one instance")
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"metric {k}={v} outside [0, 1]")

    def to_record(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "count": self.count,
                "config_digest": self.config_digest, "flags": self.flags}

    def table(self) -> str:
        width = max(len(k) for k in self.metrics) if self.metrics else 6
        lines = [f"task: {self.task}   instances: {self.count}   config: {self.config_digest or '-'}"]
        lines += [f"  {k:<{width}}  {v:8.4f}" for k, v in self.metrics.items()]
        lines += [f"  ! {f}" for f in self.flags]
        return "\n".join(lines)


def _coords(b) -> tuple[float, float, float, float]:
    return b.coords if isinstance(b, BBox) else tuple(float(c) for c in b)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return inter / union


def acc_at_05(predictions: Sequence, golds: Sequence) -> float:
    """Fraction of predictions whose IoU with the gold box is strictly above 0.5."""
    if len(predictions) != len(golds):
        raise DomainError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not predictions:
        raise DomainError("accuracy of an empty list is undefined")
    return sum(iou(p, g) > 0.5 for p, g in zip(predictions, golds)) / len(predictions)


def merge_boxes(boxes: Sequence):
    """Coordinate-wise bounding rectangle; returns a BBox when given BBoxes."""
    if not boxes:
        raise DomainError("cannot merge an empty set of boxes")
    cs = [_coords(b) for b in boxes]
    merged = (min(c[0] for c in cs), min(c[1] for c in cs), max(c[2] for c in cs), max(c[3] for c in cs))
    first = boxes[0]
    if isinstance(first, BBox):
        return BBox(*merged, first.image_w, first.image_h)
    return merged


def rank_triplets(predictions: Iterable[Sequence], relation_order: dict[str, int] | None = None) -> list[tuple]:
    """Sort ``(subj, rel, obj, score)`` by score, ties by (subj, relation id, obj)."""
    rid = (lambda r: relation_order[r]) if relation_order else (lambda r: r)
    return sorted(((s, r, o, float(sc)) for s, r, o, sc in predictions), key=lambda t: (-t[3], t[0], rid(t[1]), t[2]))


def _image_hits(preds, golds, k, relation_order):
    top = {(s, r, o) for s, r, o, _ in rank_triplets(preds, relation_order)[:k]}
    return [tuple(g) in top for g in golds]


def recall_at_k(images: Sequence[tuple[Sequence, Sequence]], k: int,
                relation_order: dict[str, int] | None = None) -> float:
    """Mean over images (with at least one gold) of the gold fraction found in the top ``k``.

    ``images`` holds ``(predictions, golds)`` per image.
    """
    vals = []
    for preds, golds in images:
        if not golds:
            continue
        hits = _image_hits(preds, golds, k, relation_order)
        vals.append(sum(hits) / len(golds))
    if not vals:
        raise DomainError("no image has a gold triplet")
    return float(np.mean(vals))


def per_class_recall_at_k(images: Sequence[tuple[Sequence, Sequence]], k: int,
                          relation_order: dict[str, int] | None = None) -> dict:
    per_class = defaultdict(list)
    for preds, golds in images:
        if not golds:
            continue
        hits = _image_hits(preds, golds, k, relation_order)
        by_rel = defaultdict(list)
        for g, h in zip(golds, hits):
            by_rel[g[1]].append(h)
        for rel, hs in by_rel.items():
            per_class[rel].append(sum(hs) / len(hs))
    return {rel: float(np.mean(v)) for rel, v in per_class.items()}


def mean_recall_at_k(per_class: dict, k: int | None = None) -> float:
    """Unweighted mean of per-class recalls (classes without golds are absent)."""
    if not per_class:
        raise DomainError("mean recall needs at least one class with a gold triplet")
    return float(np.mean(list(per_class.values())))


def choice_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    if len(predicted) != len(gold):
        raise DomainError(f"{len(predicted)} predictions vs {len(gold)} golds")
    if not gold:
        raise DomainError("accuracy of an empty list is undefined")
    return sum(int(p) == int(g) for p, g in zip(predicted, gold)) / len(gold)


def chained_accuracy(pred_answer, gold_answer, pred_rationale, gold_rationale) -> float:
    """Q->AR: an item counts only when both the answer and the rationale are right."""
    n = len(gold_answer)
    if not (len(pred_answer) == len(pred_rationale) == len(gold_rationale) == n) or n == 0:
        raise DomainError("chained accuracy needs four aligned, non-empty lists")
    ok = [int(pa) == int(ga) and int(pr) == int(gr)
          for pa, ga, pr, gr in zip(pred_answer, gold_answer, pred_rationale, gold_rationale)]
    return sum(ok) / n


# ------------------------------------------------------------------ dumps


def write_dump(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_dump(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DomainError(f"{path}:{n}: not valid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or "task" not in rec:
                raise DomainError(f"{path}:{n}: record without a task field")
            out.append(rec)
    if not out:
        raise DomainError(f"{path}: empty dump")
    return out


def _need(rec: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in rec]
    if missing:
        raise DomainError(f"record {rec.get('id', '?')} lacks {missing}")


def evaluate_dump(records: Sequence[dict], config_digest: str = "") -> EvalReport:
    """Compute the task's metrics from prediction records (all of one task)."""
    tasks = {r["task"] for r in records}
    if len(tasks) != 1:
        raise DomainError(f"dump mixes tasks {sorted(tasks)}")
    task = tasks.pop()
    flags: list[str] = []
    if task == "rec":
        for r in records:
            _need(r, "pred", "gold")
        preds = [r["pred"] for r in records]
        golds = [r["gold"] for r in records]
        zero = sum((g[2] - g[0]) * (g[3] - g[1]) <= 0 for g in golds)
        if zero:
            flags.append(f"{zero} zero-area gold boxes score IoU 0")
        ious = [iou(p, g) for p, g in zip(preds, golds)]
        metrics = {"acc@0.5": acc_at_05(preds, golds), "mean_iou": float(np.mean(ious))}
        return EvalReport(task, metrics, len(records), config_digest, flags)
    if task == "ground":
        preds, golds = [], []
        for r in records:
            _need(r, "pred", "gold")
            if len(r["pred"]) != len(r["gold"]):
                raise DomainError(f"record {r.get('id', '?')}: phrase count mismatch")
            preds += r["pred"]
            golds += [merge_boxes(g) for g in r["gold"]]
        metrics = {"acc@0.5": acc_at_05(preds, golds)}
        return EvalReport(task, metrics, len(records), config_digest, flags)
    if task == "vrd":
        images = []
        order: dict[str, int] = {}
        for r in records:
            _need(r, "predictions", "gold")
            images.append(([tuple(p) for p in r["predictions"]], [tuple(g) for g in r["gold"]]))
            for rel in r.get("catalog", []):
                order.setdefault(rel, len(order))
        order = order or None
        metrics = {}
        for k in (50, 100):
            metrics[f"R@{k}"] = recall_at_k(images, k, order)
            metrics[f"mR@{k}"] = mean_recall_at_k(per_class_recall_at_k(images, k, order), k)
        return EvalReport(task, metrics, len(records), config_digest, flags)
    if task == "vcr":
        for r in records:
            _need(r, "answer_scores", "answer_gold", "rationale_scores_gold", "rationale_scores_pred",
                  "rationale_gold")
        pa = [int(np.argmax(r["answer_scores"])) for r in records]
        ga = [r["answer_gold"] for r in records]
        pr_gold = [int(np.argmax(r["rationale_scores_gold"])) for r in records]
        pr_pred = [int(np.argmax(r["rationale_scores_pred"])) for r in records]
        gr = [r["rationale_gold"] for r in records]
        metrics = {
            "Q->A": choice_accuracy(pa, ga),
            "QA->R": choice_accuracy(pr_gold, gr),
            "Q->AR": chained_accuracy(pa, ga, pr_pred, gr),
        }
        return EvalReport(task, metrics, len(records), config_digest, flags)
    if task == "vqa":
        for r in records:
            _need(r, "pred", "gold")
        metrics = {"accuracy": sum(r["pred"] == r["gold"] for r in records) / len(records)}
        return EvalReport(task, metrics, len(records), config_digest, flags)
    raise DomainError(f"unknown task {task!r} in dump")

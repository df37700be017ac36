"""Pre-training, prompt tuning and batched inference over synthetic scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tasks as T
from .codec import VocabSpec, quantize_box
from .masking import MaskingSampler
from .metrics import EvalReport, evaluate_dump
from .model import ModelConfig, forward, gmlm_logits, init_params, itm_logit
from .objective import log_softmax, softmax
from .prompts import NO_RELATION, REC, PromptInstance, decode_box, score_catalog, yes_score
from .rng import STAGE_INIT, STAGE_PRETRAIN, STAGE_TUNE, derive_rng
from .scenes import SceneSample
from .train import LossRecord, Optimizer, TrainConfig, pad_streams, train_step

log = logging.getLogger(__name__)

TUNE_TASKS = ("rec", "ground", "vcr", "vrd", "vqa")


def model_config_for(vocab: VocabSpec, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab.size, pos_start=vocab.pos_start, num_bins=vocab.num_bins, **overrides)


def fresh_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return init_params(cfg, derive_rng(cfg.seed, STAGE_INIT), dtype)


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.steps = 0
        self.counts = {"n_pos": 0, "n_text": 0, "n_itm": 0, "pos_correct": 0, "text_correct": 0, "itm_correct": 0}

    def add(self, rec: LossRecord):
        self.steps += 1
        vals = {"position_loss": rec.gmlm.position_loss, "text_loss": rec.gmlm.text_loss,
                "combined": rec.gmlm.combined, "itm_loss": rec.itm_loss, "total": rec.total}
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        for k in self.counts:
            self.counts[k] += getattr(rec, k)

    def summary(self, lam: float) -> dict:
        out = {k: v / max(self.steps, 1) for k, v in self.sums.items()}
        out["lam"] = lam
        out["steps"] = self.steps
        c = self.counts
        out["pos_acc"] = c["pos_correct"] / c["n_pos"] if c["n_pos"] else None
        out["text_acc"] = c["text_correct"] / c["n_text"] if c["n_text"] else None
        out["itm_acc"] = c["itm_correct"] / c["n_itm"] if c["n_itm"] else None
        return out


def run_epoch(params: dict, cfg: ModelConfig, tc: TrainConfig, opt: Optimizer, examples: Sequence[T.Example],
              stage: str, epoch: int) -> dict:
    """One pass over ``examples`` in a seed-determined order."""
    order = derive_rng(tc.seed, stage, "order", epoch).permutation(len(examples))
    meter = _Meter()
    alpha = tc.position_alpha()
    lr = tc.epoch_lr(epoch)
    for start in range(0, len(order), tc.batch_size):
        batch = T.collate([examples[i] for i in order[start:start + tc.batch_size]], cfg.num_bins, alpha)
        meter.add(train_step(params, cfg, batch, tc, opt, lr))
    return {**meter.summary(tc.lam), "lr": lr}


EpochHook = Callable[[int, dict, dict], None]


def pretrain(params: dict, cfg: ModelConfig, tc: TrainConfig, vocab: VocabSpec, samples: Sequence[SceneSample],
             epochs: int, start_epoch: int = 0, opt: Optimizer | None = None,
             on_epoch: EpochHook | None = None) -> tuple[Optimizer, list[dict]]:
    """GMLM (+ ITM) pre-training on grounded captions, updating ``params`` in place."""
    opt = opt or Optimizer(tc, params)
    sampler = MaskingSampler(tc.masking, vocab, STAGE_PRETRAIN)
    logs = []
    for epoch in range(start_epoch, start_epoch + epochs):
        examples = T.pretrain_examples(samples, vocab, sampler, tc.seed, epoch, tc.itm_rate, tc.augment)
        summary = run_epoch(params, cfg, tc, opt, examples, STAGE_PRETRAIN, epoch)
        rec = {"stage": STAGE_PRETRAIN, "epoch": epoch, **summary}
        if on_epoch:
            on_epoch(epoch, params, rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
        logs.append(rec)
    return opt, logs


def task_examples(task: str, samples: Sequence[SceneSample], vocab: VocabSpec, seed: int, epoch: int,
                  use_itm: bool = True, do_augment: bool = False) -> list[T.Example]:
    if task in ("rec", "ground"):
        if do_augment:
            samples = [T.augment(s, derive_rng(seed, "tune-augment", task, epoch, i)) for i, s in enumerate(samples)]
        if task == "rec":
            return [T.rec_example(s, T.rec_item(s, vocab, seed, epoch=epoch), vocab) for s in samples]
        return [T.ground_example(s, T.ground_item(s, vocab), vocab) for s in samples]
    if task == "vrd":
        cat = T.vrd_catalog(vocab)
        return [T.vrd_example(samples[k], it, cat) for k, it in T.vrd_training_items(samples, vocab, cat, seed, epoch)]
    if task == "vcr":
        out = []
        for s in samples:
            out += T.vcr_examples(s, T.vcr_item(s, vocab, seed), vocab, use_itm)
        return out
    if task == "vqa":
        cat = T.vqa_catalog(vocab)
        return [T.vqa_example(s, T.vqa_item(s, vocab, cat, seed), cat) for s in samples]
    raise ValueError(f"unknown task {task!r}; expected one of {TUNE_TASKS}")


def prompt_tune(params: dict, cfg: ModelConfig, tc: TrainConfig, vocab: VocabSpec, task: str,
                samples: Sequence[SceneSample], epochs: int, start_epoch: int = 0, opt: Optimizer | None = None,
                use_itm: bool = True, on_epoch: EpochHook | None = None) -> tuple[Optimizer, list[dict]]:
    """Tune the same parameter set on task prompts; no parameters are added."""
    opt = opt or Optimizer(tc, params)
    n_before = sum(v.size for v in params.values())
    logs = []
    for epoch in range(start_epoch, start_epoch + epochs):
        examples = task_examples(task, samples, vocab, tc.seed, epoch, use_itm, tc.augment)
        rec = {"stage": f"{STAGE_TUNE}-{task}", "epoch": epoch,
               **run_epoch(params, cfg, tc, opt, examples, f"{STAGE_TUNE}-{task}", epoch)}
        if on_epoch:
            on_epoch(epoch, params, rec)
        log.info("tune %s epoch %d: %s", task, epoch, rec)
        logs.append(rec)
    assert sum(v.size for v in params.values()) == n_before
    return opt, logs


# ------------------------------------------------------------------ inference


@dataclass
class SlotOutputs:
    box_probs: list[np.ndarray]  # one (4, M) array per box group
    text_logp: np.ndarray  # (n_text_slots, vocab)
    itm: float


def infer(params: dict, cfg: ModelConfig, pixels: Sequence[np.ndarray], prompts: Sequence[PromptInstance],
          batch_size: int = 64) -> list[SlotOutputs]:
    out: list[SlotOutputs] = []
    for start in range(0, len(prompts), batch_size):
        ps = prompts[start:start + batch_size]
        images = np.stack(pixels[start:start + batch_size]).astype(np.float32) / 255.0
        tokens = pad_streams([p.stream for p in ps])
        hidden, cls, _ = forward(params, cfg, images, tokens)
        itm = itm_logit(params, cls)
        for r, p in enumerate(ps):
            boxes = [softmax(gmlm_logits(params, hidden[r, g], cfg, True)) for g in p.box_groups]
            if p.text_slots:
                text = log_softmax(gmlm_logits(params, hidden[r, p.text_slots], cfg, False))
            else:
                text = np.zeros((0, cfg.vocab_size))
            out.append(SlotOutputs(boxes, text, float(itm[r])))
    return out


def _box_list(b) -> list[float]:
    return [float(c) for c in b.coords]


def predict(task: str, params: dict, cfg: ModelConfig, vocab: VocabSpec, samples: Sequence[SceneSample],
            seed: int, use_itm: bool = True, batch_size: int = 64) -> list[dict]:
    """Prediction dump records for ``task`` on ``samples``."""
    W, H = cfg.image_size, cfg.image_size
    if task == "rec":
        items = [T.rec_item(s, vocab, seed) for s in samples]
        outs = infer(params, cfg, [s.pixels for s in samples], [it.prompt for it in items], batch_size)
        recs = []
        for s, it, o in zip(samples, items, outs):
            box = decode_box(o.box_probs[0], W, H, cfg.num_bins)
            recs.append({"task": "rec", "id": s.index, "pred": _box_list(box), "gold": _box_list(it.gold),
                         "pred_bins": list(quantize_box(box, cfg.num_bins)),
                         "gold_bins": list(quantize_box(it.gold, cfg.num_bins)), "image_w": W, "image_h": H})
        return recs
    if task == "ground":
        items = [T.ground_item(s, vocab) for s in samples]
        outs = infer(params, cfg, [s.pixels for s in samples], [it.prompt for it in items], batch_size)
        return [{"task": "ground", "id": s.index,
                 "pred": [_box_list(decode_box(b, W, H, cfg.num_bins)) for b in o.box_probs],
                 "gold": [[_box_list(b) for b in g] for g in it.golds]}
                for s, it, o in zip(samples, items, outs)]
    if task == "vrd":
        cat = T.vrd_catalog(vocab)
        recs = []
        per_scene = [T.vrd_items(s, vocab, cat) for s in samples]
        flat = [(k, it) for k, its in enumerate(per_scene) for it in its]
        outs = infer(params, cfg, [samples[k].pixels for k, _ in flat], [it.prompt for _, it in flat], batch_size)
        by_scene: dict[int, list] = {k: [] for k in range(len(samples))}
        for (k, it), o in zip(flat, outs):
            by_scene[k].append((it, score_catalog(o.text_logp, cat)))
        for k, s in enumerate(samples):
            preds, gold = [], []
            for it, scores in by_scene[k]:
                best = int(np.argmax(scores))
                if cat.names[best] != NO_RELATION:
                    preds.append([it.subject, cat.names[best], it.object, float(scores[best])])
                if it.relation != NO_RELATION:
                    gold.append([it.subject, it.relation, it.object])
            recs.append({"task": "vrd", "id": s.index, "predictions": preds, "gold": gold,
                         "catalog": list(cat.names)})
        return recs
    if task == "vcr":
        return _predict_vcr(params, cfg, vocab, samples, seed, use_itm, batch_size)
    if task == "vqa":
        cat = T.vqa_catalog(vocab)
        items = [T.vqa_item(s, vocab, cat, seed) for s in samples]
        outs = infer(params, cfg, [s.pixels for s in samples], [it.prompt for it in items], batch_size)
        recs = []
        for s, it, o in zip(samples, items, outs):
            scores = score_catalog(o.text_logp, cat)
            recs.append({"task": "vqa", "id": s.index, "pred": cat.names[int(np.argmax(scores))],
                         "gold": it.answer, "scores": [float(x) for x in scores]})
        return recs
    raise ValueError(f"unknown task {task!r}; expected one of {TUNE_TASKS}")


def _predict_vcr(params, cfg, vocab, samples, seed, use_itm, batch_size):
    items = [T.vcr_item(s, vocab, seed) for s in samples]

    def scores(prompts, pix):
        outs = infer(params, cfg, pix, prompts, batch_size)
        if use_itm:
            return [o.itm for o in outs]
        return [yes_score(np.exp(o.text_logp[0]), vocab) for o in outs]

    def grid(rows):
        prompts, pix = [], []
        for s, it, a, r_list in rows:
            for r in r_list:
                prompts.append(T.vcr_prompt(it, a, r, vocab, use_itm))
                pix.append(s.pixels)
        return scores(prompts, pix)

    n_a = [len(it.answers) for it in items]
    flat = grid([(s, it, a, [None]) for s, it in zip(samples, items) for a in range(len(it.answers))])
    ans_scores, pos = [], 0
    for n in n_a:
        ans_scores.append(flat[pos:pos + n])
        pos += n
    pred_a = [int(np.argmax(a)) for a in ans_scores]
    n_r = [len(it.rationales) for it in items]
    gold_r = grid([(s, it, it.answer_gold, list(range(len(it.rationales)))) for s, it in zip(samples, items)])
    pred_r = grid([(s, it, pa, list(range(len(it.rationales)))) for s, it, pa in zip(samples, items, pred_a)])
    recs, pos = [], 0
    for s, it, a, n in zip(samples, items, ans_scores, n_r):
        recs.append({"task": "vcr", "id": s.index, "answer_scores": a, "answer_gold": it.answer_gold,
                     "rationale_scores_gold": gold_r[pos:pos + n], "rationale_scores_pred": pred_r[pos:pos + n],
                     "rationale_gold": it.rationale_gold, "scorer": "itm" if use_itm else "yes"})
        pos += n
    return recs


def evaluate(task: str, params: dict, cfg: ModelConfig, vocab: VocabSpec, samples: Sequence[SceneSample],
             seed: int, use_itm: bool = True, config_digest: str = "") -> tuple[EvalReport, list[dict]]:
    records = predict(task, params, cfg, vocab, samples, seed, use_itm)
    return evaluate_dump(records, config_digest), records


def mean_bin_error(records: Sequence[dict]) -> float:
    """Mean absolute bin distance between predicted and gold REC boxes."""
    errs = [abs(p - g) for r in records for p, g in zip(r["pred_bins"], r["gold_bins"])]
    return float(np.mean(errs))


def itm_pairs(params, cfg, vocab, samples, seed) -> tuple[np.ndarray, np.ndarray]:
    """ITM logits for matched and shuffled (mismatched) caption/image pairs."""
    streams = [T.grounded_caption(s, vocab) for s in samples]
    prompts = [PromptInstance(st, REC) for st in streams]
    pix = [s.pixels for s in samples]
    # each image goes to the next scene along a random cycle, so no scene keeps its own image
    order = derive_rng(seed, "itm-eval").permutation(len(samples))
    perm = np.empty(len(samples), dtype=np.int64)
    perm[order] = np.roll(order, -1)
    matched = np.array([o.itm for o in infer(params, cfg, pix, prompts)])
    shuffled = []
    for i, o in enumerate(infer(params, cfg, [pix[j] for j in perm], prompts)):
        if samples[perm[i]].caption != samples[i].caption:
            shuffled.append(o.itm)
    return matched, np.array(shuffled)

"""Objective and masking ablations measured on held-out REC accuracy.

Every variant starts from a fresh model for each seed, pre-trains on the same
scenes, then prompt-tunes on REC. Held-out accuracy@0.5 is recorded after
pre-training (zero-shot, epoch 0) and after every tuning epoch, which gives
both the final accuracy and the number of tuning epochs needed to reach the
threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import pipeline as P
from .masking import INDEPENDENT, STRUCTURED
from .scenes import generate_many


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str
    position_rate: float
    ordering_aware: bool


VARIANTS = {
    "oao": Variant("oao", STRUCTURED, 0.0, True),
    "one-hot": Variant("one-hot", STRUCTURED, 0.0, False),
    "indep-20": Variant("indep-20", INDEPENDENT, 0.2, True),
    "indep-40": Variant("indep-40", INDEPENDENT, 0.4, True),
    "indep-60": Variant("indep-60", INDEPENDENT, 0.6, True),
}


def epochs_to_threshold(curve, threshold: float) -> int | None:
    """First index whose accuracy reaches ``threshold`` (0 = right after pre-training)."""
    for epoch, acc in enumerate(curve):
        if acc >= threshold:
            return epoch
    return None


def run_variant(cfg, variant: Variant, seed: int, train, test) -> dict:
    mcfg = replace(cfg.model_config(), seed=seed)
    masking = replace(cfg.train.masking, mode=variant.mode, position_rate=variant.position_rate, seed=seed)
    tc = replace(cfg.train, seed=seed, ordering_aware=variant.ordering_aware, masking=masking)
    vocab = cfg.vocab
    params = P.fresh_params(mcfg)
    t0 = time.time()
    P.pretrain(params, mcfg, tc, vocab, train, cfg.ablation_pretrain_epochs)

    def acc():
        report, _ = P.evaluate("rec", params, mcfg, vocab, test, seed)
        return report.metrics["acc@0.5"]

    curve = [acc()]
    opt = None
    for epoch in range(cfg.ablation_epochs):
        opt, _ = P.prompt_tune(params, mcfg, tc, vocab, "rec", train, 1, epoch, opt)
        curve.append(acc())
    return {
        "variant": variant.name,
        "seed": seed,
        "curve": curve,
        "final_acc": curve[-1],
        "epochs_to_threshold": epochs_to_threshold(curve, cfg.ablation_threshold),
        "seconds": round(time.time() - t0, 1),
    }


def run_ablation(cfg, progress: Callable[[dict], None] | None = None) -> list[dict]:
    unknown = [v for v in cfg.ablation_variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; expected some of {sorted(VARIANTS)}")
    train = generate_many(cfg.scene, cfg.ablation_train)
    test = generate_many(cfg.scene, cfg.ablation_test, cfg.test_offset)
    rows = []
    for seed in cfg.ablation_seeds:
        for name in cfg.ablation_variants:
            row = run_variant(cfg, VARIANTS[name], seed, train, test)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize(rows: list[dict], max_epochs: int) -> dict:
    """Per-variant means; a run that never reaches the threshold counts ``max_epochs + 1`` epochs."""
    out = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        mine = [r for r in rows if r["variant"] == name]
        eps = [r["epochs_to_threshold"] if r["epochs_to_threshold"] is not None else max_epochs + 1 for r in mine]
        out[name] = {
            "runs": len(mine),
            "mean_final_acc": float(np.mean([r["final_acc"] for r in mine])),
            "mean_epochs_to_threshold": float(np.mean(eps)),
            "reached": sum(r["epochs_to_threshold"] is not None for r in mine),
        }
    return out


def ablation_table(rows: list[dict]) -> str:
    max_epochs = max(len(r["curve"]) for r in rows) - 1 if rows else 0
    lines = [f"{'variant':<10} {'seed':>4} {'final acc':>9} {'epochs':>6}  curve"]
    for r in rows:
        ep = "-" if r["epochs_to_threshold"] is None else str(r["epochs_to_threshold"])
        curve = " ".join(f"{a:.2f}" for a in r["curve"])
        lines.append(f"{r['variant']:<10} {r['seed']:>4} {r['final_acc']:>9.3f} {ep:>6}  {curve}")
    lines.append("")
    lines.append(f"{'variant':<10} {'runs':>4} {'mean acc':>9} {'mean ep':>7}  (unreached counts {max_epochs + 1})")
    for name, s in summarize(rows, max_epochs).items():
        lines.append(f"{name:<10} {s['runs']:>4} {s['mean_final_acc']:>9.3f} {s['mean_epochs_to_threshold']:>7.2f}")
    return "\n".join(lines)

"""Losses, gradients and parameter updates for the toy encoder."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .masking import MaskingConfig
from .model import ModelConfig, backward, forward, gmlm_logits, itm_logit
from .objective import GmlmLossBreakdown, gmlm_loss, log_softmax, soft_label_matrix, softmax


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.97  # multiplier applied once per epoch within a stage
    batch_size: int = 32
    epochs: int = 10
    lam: float = 2.0
    alpha: float = 0.25
    ordering_aware: bool = True  # False -> one-hot position targets
    itm_rate: float = 0.25  # fraction of batch items paired with a wrong image
    itm_weight: float = 1.0
    optimizer: str = "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    augment: bool = True
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.masking, dict):
            self.masking = MaskingConfig(**self.masking)
        if not (self.lr > 0 and self.lam >= 0 and self.alpha > 0 and self.batch_size > 0):
            raise ValueError("lr, alpha and batch size must be positive; lambda non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay {self.lr_decay} outside (0, 1]")
        if not 0 <= self.itm_rate <= 1:
            raise ValueError(f"itm_rate {self.itm_rate} outside [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def epoch_lr(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch

    def position_alpha(self) -> float | None:
        return self.alpha if self.ordering_aware else None


@dataclass
class Batch:
    """Model inputs plus supervision for one step.

    ``pos_index``/``text_index`` are (n, 2) arrays of (row, slot) pairs;
    ``pos_targets`` holds one label distribution over the ``M`` bins per
    position slot and ``text_targets`` one gold id per text slot.
    ``itm_labels`` may be ``None``; otherwise 1/0 per row with ``itm_mask``
    selecting which rows count.
    """

    images: np.ndarray
    tokens: np.ndarray
    pos_index: np.ndarray
    pos_targets: np.ndarray
    text_index: np.ndarray
    text_targets: np.ndarray
    itm_labels: np.ndarray | None = None
    itm_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass
class LossRecord:
    gmlm: GmlmLossBreakdown
    itm_loss: float
    total: float
    n_pos: int
    n_text: int
    n_itm: int
    pos_correct: int = 0
    text_correct: int = 0
    itm_correct: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("gmlm"))
        return d


def pad_streams(streams, pad: int = 0) -> np.ndarray:
    T = max(len(s) for s in streams)
    out = np.full((len(streams), T), pad, dtype=np.int64)
    for i, s in enumerate(streams):
        out[i, : len(s)] = s
    return out


def loss_and_grads(params: dict, cfg: ModelConfig, batch: Batch, lam: float, itm_weight: float = 1.0,
                   need_grads: bool = True):
    """Combined ``lam * L_p + L_t + itm_weight * L_itm`` and its gradient.

    Each term is a mean over its own slots (rows for ITM); an empty term is 0.
    """
    hidden, cls, cache = forward(params, cfg, batch.images, batch.tokens, keep_cache=need_grads)
    dtype = hidden.dtype
    d_hidden = np.zeros_like(hidden) if need_grads else None
    g_emb = np.zeros_like(params["tok_emb"]) if need_grads else None

    lp = 0.0
    pos_correct = text_correct = itm_correct = 0
    n_pos = len(batch.pos_index)
    if n_pos:
        r, c = batch.pos_index[:, 0], batch.pos_index[:, 1]
        h = hidden[r, c]
        logits = gmlm_logits(params, h, cfg, positions_only=True)
        logp = log_softmax(logits)
        y = batch.pos_targets.astype(dtype, copy=False)
        lp = float(-(y * logp).sum(1).mean())
        pos_correct = int((logp.argmax(1) == y.argmax(1)).sum())
        if need_grads and lam != 0:
            dl = (np.exp(logp) - y) * (lam / n_pos)
            np.add.at(d_hidden, (r, c), dl @ params["tok_emb"][cfg.pos_start:])
            g_emb[cfg.pos_start:] += dl.T @ h

    lt = 0.0
    n_text = len(batch.text_index)
    if n_text:
        r, c = batch.text_index[:, 0], batch.text_index[:, 1]
        h = hidden[r, c]
        logits = gmlm_logits(params, h, cfg, positions_only=False)
        logp = log_softmax(logits)
        gold = batch.text_targets
        lt = float(-logp[np.arange(n_text), gold].mean())
        text_correct = int((logp.argmax(1) == gold).sum())
        if need_grads:
            dl = np.exp(logp)
            dl[np.arange(n_text), gold] -= 1.0
            dl /= n_text
            np.add.at(d_hidden, (r, c), dl @ params["tok_emb"])
            g_emb += dl.T @ h

    li = 0.0
    n_itm = 0
    g_itm_w = g_itm_b = None
    if batch.itm_labels is not None:
        mask = np.ones(batch.size, bool) if batch.itm_mask is None else batch.itm_mask.astype(bool)
        n_itm = int(mask.sum())
        if n_itm:
            z = itm_logit(params, cls)[mask]
            yl = batch.itm_labels[mask].astype(dtype)
            # log(1 + e^z) - y z, computed stably
            li = float((np.logaddexp(0.0, z) - yl * z).mean())
            itm_correct = int(((z > 0) == (yl > 0.5)).sum())
            if need_grads and itm_weight != 0:
                dz = (1.0 / (1.0 + np.exp(-z)) - yl) * (itm_weight / n_itm)
                d_hidden[np.flatnonzero(mask), 0] += dz[:, None] * params["itm_w"]
                g_itm_w = cls[mask].T @ dz
                g_itm_b = np.array([dz.sum()], dtype=dtype)

    breakdown = gmlm_loss(lp, lt, lam)
    total = breakdown.combined + itm_weight * li
    record = LossRecord(breakdown, li, total, n_pos, n_text, n_itm, pos_correct, text_correct, itm_correct)
    if not need_grads:
        return record, None
    grads = backward(params, cfg, cache, d_hidden)
    grads["tok_emb"] += g_emb
    if g_itm_w is not None:
        grads["itm_w"] += g_itm_w
        grads["itm_b"] += g_itm_b
    return record, grads


class Optimizer:
    """Plain SGD (optionally with momentum) or Adam over a parameter dict."""

    def __init__(self, tc: TrainConfig, params: dict):
        self.tc = tc
        self.step_count = 0
        self.state: dict[str, np.ndarray] = {}
        if tc.optimizer == "adam":
            for k, v in params.items():
                self.state[f"m.{k}"] = np.zeros_like(v)
                self.state[f"v.{k}"] = np.zeros_like(v)
        elif tc.momentum:
            for k, v in params.items():
                self.state[f"m.{k}"] = np.zeros_like(v)

    @classmethod
    def restore(cls, tc: TrainConfig, params: dict, state: dict, step_count: int) -> "Optimizer":
        opt = cls(tc, params)
        missing = set(opt.state) - set(state)
        if missing:
            raise ValueError(f"optimizer state lacks {sorted(missing)[:3]}")
        opt.state = {k: np.array(state[k], dtype=params[k.split(".", 1)[1]].dtype) for k in opt.state}
        opt.step_count = step_count
        return opt

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        tc = self.tc
        lr = tc.lr if lr is None else lr
        self.step_count += 1
        if tc.grad_clip:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > tc.grad_clip:
                s = tc.grad_clip / norm
                grads = {k: g * s for k, g in grads.items()}
        if tc.optimizer == "adam":
            b1, b2 = tc.beta1, tc.beta2
            c1 = 1 - b1 ** self.step_count
            c2 = 1 - b2 ** self.step_count
            for k, g in grads.items():
                m, v = self.state[f"m.{k}"], self.state[f"v.{k}"]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                upd = (m / c1) / (np.sqrt(v / c2) + tc.eps)
                if tc.weight_decay and params[k].ndim > 1:
                    upd = upd + tc.weight_decay * params[k]
                params[k] -= (lr * upd).astype(params[k].dtype)
        else:
            for k, g in grads.items():
                if tc.weight_decay and params[k].ndim > 1:
                    g = g + tc.weight_decay * params[k]
                if tc.momentum:
                    m = self.state[f"m.{k}"]
                    m *= tc.momentum
                    m += g
                    g = m
                params[k] -= (lr * g).astype(params[k].dtype)


def train_step(params: dict, cfg: ModelConfig, batch: Batch, tc: TrainConfig, opt: Optimizer,
               lr: float | None = None) -> LossRecord:
    """One update in place; raises :class:`TrainingError` on a non-finite loss."""
    record, grads = loss_and_grads(params, cfg, batch, tc.lam, tc.itm_weight)
    if not math.isfinite(record.total):
        dump = json.dumps({
            "loss": record.to_dict(),
            "step": opt.step_count,
            "nonfinite_params": [k for k, v in params.items() if not np.isfinite(v).all()],
        }, default=str)
        raise TrainingError(f"non-finite loss at step {opt.step_count}: {dump}")
    opt.step(params, grads, lr)
    return record


def position_targets(bins, num_bins: int, alpha: float | None) -> np.ndarray:
    return soft_label_matrix(bins, num_bins, alpha) if len(bins) else np.zeros((0, num_bins))


def predict_slots(params: dict, cfg: ModelConfig, images: np.ndarray, tokens: np.ndarray, slots: np.ndarray,
                  positions_only: bool) -> np.ndarray:
    """Probability rows at the given (row, slot) pairs."""
    hidden, _, _ = forward(params, cfg, images, tokens)
    h = hidden[slots[:, 0], slots[:, 1]]
    return softmax(gmlm_logits(params, h, cfg, positions_only))

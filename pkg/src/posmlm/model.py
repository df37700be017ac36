"""A small joint image-text transformer encoder with explicit backpropagation.

The encoder reads ``[CLS]`` + text/position tokens followed by image patches,
all in one bidirectional pre-LayerNorm stack. Token inputs add a learned
coordinate-role embedding (which of the four box slots, or none) and a
segment embedding counting the box groups closed so far, which ties each
phrase to the group that follows it; patch
positions are a learned row embedding plus a learned column embedding. Two heads sit on top:

* GMLM: scores are inner products of the final hidden state with rows of the
  (tied) token embedding table;
* ITM: a linear logit on the ``[CLS]`` hidden state.

Parameters are a flat ``dict[str, np.ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .codec import CLOSE, OPEN, PAD, DomainError


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    patch: int = 8
    image_size: int = 64
    channels: int = 3
    num_bins: int = 16
    vocab_size: int = 0
    pos_start: int = 0  # first position-token id
    max_text_len: int = 48
    max_segments: int = 8  # box groups beyond this share the last segment embedding
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise DomainError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.image_size % self.patch:
            raise DomainError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.vocab_size <= 0 or not 0 < self.pos_start < self.vocab_size:
            raise DomainError("vocab_size and pos_start must describe a vocabulary with position tokens")
        if self.vocab_size - self.pos_start != self.num_bins:
            raise DomainError("position range of the vocabulary must hold exactly num_bins ids")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def max_seq_len(self) -> int:
        return self.max_text_len + self.num_patches

    def to_dict(self) -> dict:
        return asdict(self)


def layer_keys(i: int) -> list[str]:
    return [f"l{i}.{k}" for k in (
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    )]


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    d, s = cfg.dim, cfg.init_scale

    def normal(*shape, scale=s):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    p: dict[str, np.ndarray] = {
        "tok_emb": normal(cfg.vocab_size, d),
        "text_pos": normal(cfg.max_text_len, d),
        "patch_w": normal(cfg.patch_dim, d, scale=1.0 / math.sqrt(cfg.patch_dim)),
        "patch_b": np.zeros(d, dtype),
        "patch_row": normal(cfg.grid, d),
        "patch_col": normal(cfg.grid, d),
        "slot_role": normal(5, d),
        "segment": normal(cfg.max_segments, d),
    }
    for i in range(cfg.layers):
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 = layer_keys(i)
        p[ln1_g] = np.ones(d, dtype)
        p[ln1_b] = np.zeros(d, dtype)
        for w, b in ((wq, bq), (wk, bk), (wv, bv), (wo, bo)):
            p[w] = normal(d, d, scale=1.0 / math.sqrt(d))
            p[b] = np.zeros(d, dtype)
        p[wo] *= 1.0 / math.sqrt(2 * cfg.layers)
        p[ln2_g] = np.ones(d, dtype)
        p[ln2_b] = np.zeros(d, dtype)
        p[w1] = normal(d, cfg.ff_dim, scale=1.0 / math.sqrt(d))
        p[b1] = np.zeros(cfg.ff_dim, dtype)
        p[w2] = normal(cfg.ff_dim, d, scale=1.0 / math.sqrt(cfg.ff_dim * 2 * cfg.layers))
        p[b2] = np.zeros(d, dtype)
    p["lnf_g"] = np.ones(d, dtype)
    p["lnf_b"] = np.zeros(d, dtype)
    p["itm_w"] = normal(d)
    p["itm_b"] = np.zeros(1, dtype)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), row-major over patches."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


# ------------------------------------------------------------------ primitives

_LN_EPS = 1e-5


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------------ forward


def slot_roles(tokens: np.ndarray) -> np.ndarray:
    """0 outside box groups, k = 1..4 for the k-th slot after a ``<``."""
    roles = np.zeros(tokens.shape, dtype=np.int64)
    for k in range(1, 5):
        roles[:, k:][tokens[:, :-k] == OPEN] = k
    return roles


def segments(tokens: np.ndarray, max_segments: int) -> np.ndarray:
    """Number of ``>`` strictly before each slot, so a phrase shares an id with its box group."""
    closed = np.cumsum(tokens == CLOSE, axis=1) - (tokens == CLOSE)
    return np.minimum(closed, max_segments - 1)


def _patch_positions(params: dict, cfg: ModelConfig) -> np.ndarray:
    return (params["patch_row"][:, None, :] + params["patch_col"][None, :, :]).reshape(cfg.num_patches, cfg.dim)


def _check_inputs(cfg: ModelConfig, images: np.ndarray, tokens: np.ndarray):
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DomainError(
            f"images must be (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {images.shape}"
        )
    if tokens.ndim != 2 or tokens.shape[0] != images.shape[0]:
        raise DomainError(f"tokens must be (B, T) matching {images.shape[0]} images, got {tokens.shape}")
    if tokens.shape[1] > cfg.max_text_len:
        raise DomainError(
            f"stream length {tokens.shape[1]} + {cfg.num_patches} patches exceeds max sequence {cfg.max_seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DomainError("token id outside the vocabulary")


def forward(params: dict, cfg: ModelConfig, images: np.ndarray, tokens: np.ndarray, keep_cache: bool = False):
    """Run the encoder.

    Returns ``(hidden, cls, cache)`` where ``hidden`` is (B, T, dim) for the
    token slots after the final LayerNorm, ``cls`` is ``hidden[:, 0]`` and
    ``cache`` is ``None`` unless ``keep_cache``. ``[PAD]`` slots are excluded
    as attention keys.
    """
    images = np.asarray(images)
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_inputs(cfg, images, tokens)
    dtype = params["tok_emb"].dtype
    B, T = tokens.shape
    H, dh = cfg.heads, cfg.dim // cfg.heads
    patches = patchify(images.astype(dtype, copy=False), cfg.patch)
    roles = slot_roles(tokens)
    segs = segments(tokens, cfg.max_segments)
    x = np.concatenate(
        [
            params["tok_emb"][tokens] + params["text_pos"][:T] + params["slot_role"][roles] + params["segment"][segs],
            patches @ params["patch_w"] + params["patch_b"] + _patch_positions(params, cfg),
        ],
        axis=1,
    )
    S = x.shape[1]
    key_bias = np.zeros((B, 1, 1, S), dtype)
    key_bias[:, 0, 0, :T][tokens == PAD] = -1e9
    caches = []
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 = (params[k] for k in layer_keys(i))
        a, ln1c = _ln_fwd(x, ln1_g, ln1_b)
        q = (a @ wq + bq).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = (a @ wk + bk).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        v = (a @ wv + bv).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        attn = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + key_bias)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
        x = x + ctx @ wo + bo
        a2, ln2c = _ln_fwd(x, ln2_g, ln2_b)
        f, gc = _gelu_fwd(a2 @ w1 + b1)
        x = x + f @ w2 + b2
        if keep_cache:
            caches.append((a, ln1c, q, k, v, attn, ctx, a2, ln2c, f, gc))
    hf, lnfc = _ln_fwd(x, params["lnf_g"], params["lnf_b"])
    hidden = hf[:, :T]
    cache = None
    if keep_cache:
        cache = {"tokens": tokens, "roles": roles, "segments": segs, "patches": patches, "layers": caches,
                 "lnf": lnfc, "T": T, "S": S}
    return hidden, hidden[:, 0], cache


def backward(params: dict, cfg: ModelConfig, cache: dict, d_hidden: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all encoder parameters given dL/d(hidden) on the token slots.

    Head gradients (tied embedding use, ITM weights) are added by the caller.
    """
    tokens, T, S = cache["tokens"], cache["T"], cache["S"]
    B = tokens.shape[0]
    H, dh = cfg.heads, cfg.dim // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dhf = np.zeros((B, S, cfg.dim), dtype=d_hidden.dtype)
    dhf[:, :T] = d_hidden
    dx, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dhf, cache["lnf"])
    for i in reversed(range(cfg.layers)):
        keys = layer_keys(i)
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 = keys
        a, ln1c, q, k, v, attn, ctx, a2, ln2c, f, gc = cache["layers"][i]
        # feed-forward
        grads[w2] = f.reshape(-1, cfg.ff_dim).T @ dx.reshape(-1, cfg.dim)
        grads[b2] = dx.reshape(-1, cfg.dim).sum(0)
        dpre = _gelu_bwd(dx @ params[w2].T, gc)
        grads[w1] = a2.reshape(-1, cfg.dim).T @ dpre.reshape(-1, cfg.ff_dim)
        grads[b1] = dpre.reshape(-1, cfg.ff_dim).sum(0)
        da2 = dpre @ params[w1].T
        dln, grads[ln2_g], grads[ln2_b] = _ln_bwd(da2, ln2c)
        dx = dx + dln
        # attention
        grads[wo] = ctx.reshape(-1, cfg.dim).T @ dx.reshape(-1, cfg.dim)
        grads[bo] = dx.reshape(-1, cfg.dim).sum(0)
        dctx = (dx @ params[wo].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        a_flat = a.reshape(-1, cfg.dim)
        da = np.zeros_like(a)
        for dproj, w, b in ((dq, wq, bq), (dk, wk, bk), (dv, wv, bv)):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
            grads[w] = a_flat.T @ dflat.reshape(-1, cfg.dim)
            grads[b] = dflat.reshape(-1, cfg.dim).sum(0)
            da += dflat @ params[w].T
        dln, grads[ln1_g], grads[ln1_b] = _ln_bwd(da, ln1c)
        dx = dx + dln
    dtok = dx[:, :T]
    dpatch = dx[:, T:]
    np.add.at(grads["tok_emb"], tokens.reshape(-1), dtok.reshape(-1, cfg.dim))
    grads["text_pos"][:T] = dtok.sum(0)
    grads["patch_w"] = cache["patches"].reshape(-1, cfg.patch_dim).T @ dpatch.reshape(-1, cfg.dim)
    grads["patch_b"] = dpatch.reshape(-1, cfg.dim).sum(0)
    dpos = dpatch.sum(0).reshape(cfg.grid, cfg.grid, cfg.dim)
    grads["patch_row"] = dpos.sum(1)
    grads["patch_col"] = dpos.sum(0)
    np.add.at(grads["slot_role"], cache["roles"].reshape(-1), dtok.reshape(-1, cfg.dim))
    np.add.at(grads["segment"], cache["segments"].reshape(-1), dtok.reshape(-1, cfg.dim))
    return grads


# ------------------------------------------------------------------ heads


def gmlm_logits(params: dict, hidden: np.ndarray, cfg: ModelConfig, positions_only: bool) -> np.ndarray:
    """Scores ``h · e_i`` against the position rows or the whole embedding table."""
    table = params["tok_emb"][cfg.pos_start:] if positions_only else params["tok_emb"]
    return hidden @ table.T


def itm_logit(params: dict, cls_hidden: np.ndarray) -> np.ndarray:
    return cls_hidden @ params["itm_w"] + params["itm_b"][0]


def itm_score(params: dict, cfg: ModelConfig, images: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    _, cls, _ = forward(params, cfg, images, tokens)
    return itm_logit(params, cls)

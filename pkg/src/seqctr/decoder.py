"""Causal self-attention decoders over behavior sequences.

Two flavors share one implementation:

* conditional ("cd"): the query for slot t is built from the *next* item's
  category plus the slot position; keys/values are the preceding tokens.
  The item being predicted never enters its own row.
* unconditional ("sd"): the query for slot t is the full representation of
  token t-1, i.e. standard next-item causal self-attention.

Blocks are pre-norm: residual attention followed by a residual two-layer
ReLU feed-forward. A learned begin-of-sequence vector serves as the
key/value context for the first slot, so empty prefixes are well defined.

Position indices are end-anchored (most recent slot = 0). For the
inference-time next-item query the sequence is conceptually extended by a
phantom slot carrying the target category; a history at the length cap
drops its oldest interaction so every index stays inside the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, layer_norm, matmul, mul, relu, reshape, softmax, transpose
from .embeddings import EMBED_DIM, EmbeddingTable

MASK_OFF = -1e9  # additive score for blocked keys; exp() underflows to exact 0


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 1
    n_heads: int = 2
    model_dim: int = EMBED_DIM
    ff_dim: int = 64
    causal: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")

    def meta(self) -> dict[str, str]:
        return {
            "dec_layers": str(self.n_layers),
            "dec_heads": str(self.n_heads),
            "dec_dim": str(self.model_dim),
            "dec_ff": str(self.ff_dim),
        }


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh decoder weights. Residual projections (wo, w2) get half-scale
    init: small enough to keep the initial loss near the uniform bound,
    nonzero so history information flows from the first step."""
    d, ff = cfg.model_dim, cfg.ff_dim
    s = 1.0 / math.sqrt(d)
    r = 0.5 / math.sqrt(d)
    p: dict[str, Tensor] = {
        "bos": Tensor(rng.uniform(-s, s, size=(d,)), requires_grad=True)
    }
    for i in range(cfg.n_layers):
        lp = f"l{i}."
        p[lp + "ln_q.g"] = Tensor(np.ones(d), requires_grad=True)
        p[lp + "ln_q.b"] = Tensor(np.zeros(d), requires_grad=True)
        p[lp + "ln_kv.g"] = Tensor(np.ones(d), requires_grad=True)
        p[lp + "ln_kv.b"] = Tensor(np.zeros(d), requires_grad=True)
        p[lp + "wq"] = Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True)
        p[lp + "wk"] = Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True)
        p[lp + "wv"] = Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True)
        p[lp + "wo"] = Tensor(rng.uniform(-r, r, size=(d, d)), requires_grad=True)
        p[lp + "ln_f.g"] = Tensor(np.ones(d), requires_grad=True)
        p[lp + "ln_f.b"] = Tensor(np.zeros(d), requires_grad=True)
        p[lp + "w1"] = Tensor(rng.uniform(-s, s, size=(d, ff)), requires_grad=True)
        p[lp + "b1"] = Tensor(np.zeros(ff), requires_grad=True)
        p[lp + "w2"] = Tensor(rng.uniform(-r / math.sqrt(ff / d), r / math.sqrt(ff / d), size=(ff, d)), requires_grad=True)
        p[lp + "b2"] = Tensor(np.zeros(d), requires_grad=True)
    return p


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, n_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention on pre-projected streams.

    q: (B, Lq, d); k, v: (B, S, d); mask: additive (B, 1, Lq, S) or None.
    """
    B, Lq, d = q.shape
    S = k.shape[1]
    dh = d // n_heads
    qh = transpose(reshape(q, (B, Lq, n_heads, dh)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (B, S, n_heads, dh)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (B, S, n_heads, dh)), (0, 2, 1, 3))
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    ctx = matmul(softmax(scores, axis=-1), vh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))


def _bos_block(bos: Tensor, batch: int) -> Tensor:
    d = bos.shape[0]
    return reshape(bos, (1, 1, d)) + np.zeros((batch, 1, 1))


def _layer(h: Tensor, kv: Tensor, mask, p: dict[str, Tensor], prefix: str, cfg: DecoderConfig) -> Tensor:
    qn = layer_norm(h, p[prefix + "ln_q.g"], p[prefix + "ln_q.b"])
    kvn = layer_norm(kv, p[prefix + "ln_kv.g"], p[prefix + "ln_kv.b"])
    attn = scaled_dot_attention(
        matmul(qn, p[prefix + "wq"]),
        matmul(kvn, p[prefix + "wk"]),
        matmul(kvn, p[prefix + "wv"]),
        mask,
        cfg.n_heads,
    )
    h = h + matmul(attn, p[prefix + "wo"])
    fn = layer_norm(h, p[prefix + "ln_f.g"], p[prefix + "ln_f.b"])
    return h + (matmul(relu(matmul(fn, p[prefix + "w1"]) + p[prefix + "b1"]), p[prefix + "w2"]) + p[prefix + "b2"])


def _run_layers(queries: Tensor, kv: Tensor, mask, params, cfg) -> Tensor:
    h = queries
    for i in range(cfg.n_layers):
        h = _layer(h, kv, mask, params, f"l{i}.", cfg)
    return h


def token_repr(tables: dict[str, EmbeddingTable], item_id: int, category_id: int, position: int) -> Tensor:
    """Sum of item, category, and position embeddings for one token."""
    if not 0 <= position < tables["position"].rows:
        raise IndexError(f"position {position} out of range")
    return (
        tables["item"].lookup(item_id)
        + tables["category"].lookup(category_id)
        + tables["position"].lookup(position)
    )


def decode_rows(
    tables: dict[str, EmbeddingTable],
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    item_ids: np.ndarray,
    cat_ids: np.ndarray,
    lengths: np.ndarray,
    mode: str = "cd",
) -> Tensor:
    """Per-slot predicted embeddings for a padded batch of sequences.

    Row t (0-indexed) predicts item t from tokens 0..t-1 plus BOS; in "cd"
    mode its query carries item t's category, in "sd" mode the query is the
    previous token itself. Output shape: (B, L, d). Rows at padded slots are
    attention over BOS only and should be masked by the caller.
    """
    if mode not in ("cd", "sd"):
        raise ValueError(f"unknown decoder mode {mode!r}")
    item_ids = np.asarray(item_ids, dtype=np.int64)
    cat_ids = np.asarray(cat_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L = item_ids.shape
    d = cfg.model_dim
    if L == 0:
        return Tensor(np.zeros((B, 0, d)))

    # end-anchored positions: slot j of a length-n sequence sits n-1-j from the end
    pos_idx = np.maximum(lengths[:, None] - 1 - np.arange(L)[None, :], 0)
    tokens = (
        tables["item"].lookup(item_ids)
        + tables["category"].lookup(cat_ids)
        + tables["position"].lookup(pos_idx)
    )
    kv = concat([_bos_block(params["bos"], B), tokens], axis=1)  # (B, L+1, d)

    if mode == "cd":
        queries = tables["category"].lookup(cat_ids) + tables["position"].lookup(pos_idx)
    else:
        if L > 1:
            prev = (
                tables["item"].lookup(item_ids[:, : L - 1])
                + tables["category"].lookup(cat_ids[:, : L - 1])
                + tables["position"].lookup(pos_idx[:, : L - 1])
            )
            queries = concat([_bos_block(params["bos"], B), prev], axis=1)
        else:
            queries = _bos_block(params["bos"], B)

    key = np.arange(L + 1)[None, None, :]
    slot = np.arange(L)[None, :, None]
    real = key - 1 < lengths[:, None, None]
    if cfg.causal:
        allowed = (key == 0) | ((key <= slot) & real)
    else:
        allowed = (key == 0) | real
    mask = np.where(allowed, 0.0, MASK_OFF)[:, None, :, :]  # (B, 1, L, L+1)

    return _run_layers(queries, kv, mask, params, cfg)


def next_item_repr_batch(
    tables: dict[str, EmbeddingTable],
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    item_ids: np.ndarray,
    cat_ids: np.ndarray,
    lengths: np.ndarray,
    target_cats: np.ndarray | None = None,
    mode: str = "cd",
) -> Tensor:
    """Next-item embedding predictions g(s, c) for a padded batch: (B, d).

    The full history is the key/value context. In "cd" mode the query is the
    target category at position 0; in "sd" mode it is the most recent token
    (the target category is ignored, matching the unconditioned decoder).
    """
    if mode not in ("cd", "sd"):
        raise ValueError(f"unknown decoder mode {mode!r}")
    item_ids = np.asarray(item_ids, dtype=np.int64)
    cat_ids = np.asarray(cat_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L = item_ids.shape
    d = cfg.model_dim
    max_pos = tables["position"].rows

    # histories at the cap drop the oldest interaction: the phantom next slot
    # takes index 0 and every key must satisfy index < max_pos
    eff = np.minimum(lengths, max_pos - 1)
    offs = lengths - eff
    if L > 0:
        if offs.any():
            src = np.minimum(np.arange(L)[None, :] + offs[:, None], L - 1)
            item_ids = np.take_along_axis(item_ids, src, axis=1)
            cat_ids = np.take_along_axis(cat_ids, src, axis=1)
        pos_idx = np.maximum(eff[:, None] - np.arange(L)[None, :], 0)
        tokens = (
            tables["item"].lookup(item_ids)
            + tables["category"].lookup(cat_ids)
            + tables["position"].lookup(pos_idx)
        )
        kv = concat([_bos_block(params["bos"], B), tokens], axis=1)
    else:
        kv = _bos_block(params["bos"], B)

    if mode == "cd":
        if target_cats is None:
            raise ValueError("cd mode requires target categories")
        target_cats = np.asarray(target_cats, dtype=np.int64)
        queries = reshape(
            tables["category"].lookup(target_cats) + tables["position"].lookup(np.zeros(B, dtype=np.int64)),
            (B, 1, d),
        )
    else:
        has = (eff > 0).astype(np.float64)[:, None]
        if L > 0:
            last = np.maximum(eff - 1, 0)
            rows = np.arange(B)
            last_tok = (
                tables["item"].lookup(item_ids[rows, last])
                + tables["category"].lookup(cat_ids[rows, last])
                + tables["position"].lookup(np.ones(B, dtype=np.int64))
            )
            q = mul(last_tok, has) + mul(params["bos"], 1.0 - has)
        else:
            q = _bos_block(params["bos"], B)
            return reshape(_run_layers(q, kv, None, params, cfg), (B, d))
        queries = reshape(q, (B, 1, d))

    S = kv.shape[1]
    key = np.arange(S)[None, None, :]
    allowed = (key == 0) | (key - 1 < eff[:, None, None])
    mask = np.where(allowed, 0.0, MASK_OFF)[:, None, :, :]

    return reshape(_run_layers(queries, kv, mask, params, cfg), (B, d))


# -- single-sequence conveniences --------------------------------------------

def _as_batch(seq: list[tuple[int, int]]):
    items = np.array([[i for i, _ in seq]], dtype=np.int64).reshape(1, len(seq))
    cats = np.array([[c for _, c in seq]], dtype=np.int64).reshape(1, len(seq))
    return items, cats, np.array([len(seq)], dtype=np.int64)


def conditional_decode(tables, params, cfg, seq: list[tuple[int, int]]) -> Tensor:
    """CD rows for one sequence of (item, category) pairs: (L, d)."""
    items, cats, lengths = _as_batch(seq)
    rows = decode_rows(tables, params, cfg, items, cats, lengths, mode="cd")
    return reshape(rows, (len(seq), cfg.model_dim))


def unconditional_decode(tables, params, cfg, seq: list[tuple[int, int]]) -> Tensor:
    """SD rows for one sequence: (L, d)."""
    items, cats, lengths = _as_batch(seq)
    rows = decode_rows(tables, params, cfg, items, cats, lengths, mode="sd")
    return reshape(rows, (len(seq), cfg.model_dim))


def next_item_repr(tables, params, cfg, seq: list[tuple[int, int]], target_cat: int, mode: str = "cd") -> Tensor:
    """g(s, c): predicted next-item embedding for one sequence, shape (d,)."""
    if not 0 <= target_cat < tables["category"].rows:
        raise IndexError(f"category {target_cat} out of range")
    items, cats, lengths = _as_batch(seq)
    out = next_item_repr_batch(
        tables, params, cfg, items, cats, lengths,
        np.array([target_cat], dtype=np.int64), mode=mode,
    )
    return reshape(out, (cfg.model_dim,))

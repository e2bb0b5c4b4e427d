"""Discriminative CTR backbones: DNN, DCN-v2, and DCN-v2 with target attention.

All three consume one flat feature vector (concatenated 16-wide embedding
slots) and emit a single logit. The DCN-v2 cross network stacks three
low-rank (rank 16) cross layers, each a softmax-gated mixture of three
experts, with a parallel 256/128 ReLU branch joined before the final head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, matmul, mul, relu, reshape, softmax, transpose, tsum
from .decoder import MASK_OFF, scaled_dot_attention

BACKBONE_KINDS = ("dnn", "dcnv2", "dcnv2_ta")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    input_width: int
    hidden_dims: tuple[int, int] = (256, 128)
    n_experts: int = 3
    cross_depth: int = 3
    cross_rank: int = 16
    # width of a late-fused input joining at the combination layer, after the
    # cross and deep branches (dcnv2 only; the dnn takes late inputs in x)
    combine_extra: int = 0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if self.combine_extra and self.kind == "dnn":
            raise ValueError("the dnn backbone has no combination layer for extra inputs")


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    s = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Backbone weights; the logit head starts at zero so p(click) = 0.5."""
    w = cfg.input_width
    h1, h2 = cfg.hidden_dims
    p: dict[str, Tensor] = {}
    p["mlp.w1"] = _linear(rng, w, h1)
    p["mlp.b1"] = Tensor(np.zeros(h1), requires_grad=True)
    p["mlp.w2"] = _linear(rng, h1, h2)
    p["mlp.b2"] = Tensor(np.zeros(h2), requires_grad=True)
    if cfg.kind == "dnn":
        head_in = h2
    else:
        for layer in range(cfg.cross_depth):
            for e in range(cfg.n_experts):
                lp = f"cross.l{layer}.e{e}."
                p[lp + "u"] = _linear(rng, w, cfg.cross_rank)
                p[lp + "v"] = _linear(rng, w, cfg.cross_rank)
                p[lp + "b"] = Tensor(np.zeros(w), requires_grad=True)
            # zero gate -> uniform expert mixture at init
            p[f"cross.l{layer}.gate"] = Tensor(np.zeros((w, cfg.n_experts)), requires_grad=True)
        head_in = w + h2 + cfg.combine_extra
    p["head.w"] = Tensor(np.zeros((head_in, 1)), requires_grad=True)
    p["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return p


def _mlp(params: dict[str, Tensor], x: Tensor) -> Tensor:
    h = relu(matmul(x, params["mlp.w1"]) + params["mlp.b1"])
    return relu(matmul(h, params["mlp.w2"]) + params["mlp.b2"])


def cross_layer(x0: Tensor, xl: Tensor, u: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """Low-rank cross: x0 * (U (V^T xl) + b) + xl, batched over rows."""
    low = matmul(matmul(xl, v), transpose(u, (1, 0)))
    return mul(x0, low + b) + xl


def backbone_forward(
    cfg: BackboneConfig, params: dict[str, Tensor], x: Tensor, combine_extra: Tensor | None = None
) -> Tensor:
    """Logit of shape (B,) for a feature matrix x of shape (B, width).

    `combine_extra` is a late-fused input: it bypasses the cross and deep
    branches and joins their concatenated outputs at the combination layer.
    """
    if x.shape[-1] != cfg.input_width:
        raise ValueError(
            f"feature width {x.shape[-1]} does not match backbone layout {cfg.input_width}"
        )
    if (combine_extra.shape[-1] if combine_extra is not None else 0) != cfg.combine_extra:
        raise ValueError("late-fused input width does not match backbone layout")
    if cfg.kind == "dnn":
        final = _mlp(params, x)
    else:
        x0 = x
        xl = x
        for layer in range(cfg.cross_depth):
            gate = softmax(matmul(x0, params[f"cross.l{layer}.gate"]), axis=-1)  # (B, E)
            mix = None
            for e in range(cfg.n_experts):
                lp = f"cross.l{layer}.e{e}."
                low = matmul(matmul(xl, params[lp + "v"]), transpose(params[lp + "u"], (1, 0)))
                expert = mul(x0, low + params[lp + "b"])  # (B, w)
                onehot = np.zeros(cfg.n_experts)
                onehot[e] = 1.0
                weight = tsum(mul(gate, onehot), axis=-1, keepdims=True)  # (B, 1)
                term = mul(expert, weight)
                mix = term if mix is None else mix + term
            xl = xl + mix
        branches = [xl, _mlp(params, x)]
        if combine_extra is not None:
            branches.append(combine_extra)
        final = concat(branches, axis=-1)
    logit = matmul(final, params["head.w"]) + params["head.b"]
    return reshape(logit, (x.shape[0],))


# -- target attention -------------------------------------------------------------

def init_ta_params(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    s = 1.0 / math.sqrt(dim)
    return {
        "wq": Tensor(rng.uniform(-s, s, size=(dim, dim)), requires_grad=True),
        "wk": Tensor(rng.uniform(-s, s, size=(dim, dim)), requires_grad=True),
        "wv": Tensor(rng.uniform(-s, s, size=(dim, dim)), requires_grad=True),
    }


def target_attention(
    params: dict[str, Tensor], query: Tensor, tokens: Tensor, lengths: np.ndarray
) -> Tensor:
    """Attention-pool sequence tokens with the target as the single query.

    query: (B, d); tokens: (B, L, d) padded; empty histories yield exact
    zeros. Single-head scaled dot-product with learned q/k/v projections.
    """
    B, d = query.shape
    L = tokens.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    if L == 0:
        return Tensor(np.zeros((B, d)))
    q = reshape(matmul(query, params["wq"]), (B, 1, d))
    k = matmul(tokens, params["wk"])
    v = matmul(tokens, params["wv"])
    pad = np.arange(L)[None, :] >= lengths[:, None]
    mask = np.where(pad, MASK_OFF, 0.0)[:, None, None, :]  # (B, 1, 1, L)
    pooled = reshape(scaled_dot_attention(q, k, v, mask, n_heads=1), (B, d))
    nonempty = (lengths > 0).astype(np.float64)[:, None]
    return mul(pooled, nonempty)

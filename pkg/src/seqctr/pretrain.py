"""Stage-1 generative pretraining: per-position next-item prediction.

Each slot of a behavior sequence is scored against its true item plus k
sampled negatives (sampled softmax). Negatives come either from the same
category as the true item ("cs") or uniformly from the whole vocabulary
("rs"). Per-sequence losses are position means, so gradient scale does not
depend on history length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, backward, logsumexp, matmul, mul, reshape, transpose, tsum
from .data import CategoryItemTable, PretrainRecord
from .decoder import DecoderConfig, decode_rows, init_decoder_params
from .embeddings import EMBED_DIM, EmbeddingTable, VocabSpec, init_tables

PRETRAIN_MODES = ("cs+cd", "cs+sd", "rs+cd", "rs+sd")


def split_mode(mode: str) -> tuple[str, str]:
    """'cs+cd' -> ('cs', 'cd'): sampling strategy and decoder flavor."""
    if mode not in PRETRAIN_MODES:
        raise ValueError(f"unknown pretrain mode {mode!r}; expected one of {PRETRAIN_MODES}")
    sampling, decoder = mode.split("+")
    return sampling, decoder


@dataclass(frozen=True)
class PretrainConfig:
    mode: str = "cs+cd"
    epochs: int = 3
    lr: float = 0.001
    k_negatives: int = 10
    batch_size: int = 1
    embed_dim: int = EMBED_DIM
    seed: int = 0

    def __post_init__(self):
        split_mode(self.mode)
        if self.k_negatives < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("k_negatives, batch_size, and epochs must be >= 1")


# -- negative sampling ---------------------------------------------------------

def sample_negatives_rs(n_items: int, true_item: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k uniform draws (with replacement) over all items except the true one."""
    if n_items < 2:
        raise ValueError("need at least 2 items for random negative sampling")
    r = rng.integers(0, n_items - 1, size=k)
    return r + (r >= true_item)


def sample_negatives_cs(
    table: CategoryItemTable,
    category: int,
    true_item: int,
    k: int,
    rng: np.random.Generator,
    n_items: int,
) -> tuple[np.ndarray, bool]:
    """k negatives sharing the true item's category.

    Draws uniformly from table[category] minus the true item: without
    replacement when the pool is large enough (>= k non-true items), with
    replacement otherwise. A singleton category falls back to random
    sampling; the second return value reports that fallback.
    """
    pool = table.get(category)
    if pool is None:
        raise KeyError(f"category {category} not in sampling table")
    pos = int(np.searchsorted(pool, true_item))
    has_true = pos < pool.size and pool[pos] == true_item
    m = pool.size - int(has_true)
    if m == 0:
        return sample_negatives_rs(n_items, true_item, k, rng), True
    if m >= k:
        idx = rng.choice(m, size=k, replace=False)
    else:
        idx = rng.integers(0, m, size=k)
    if has_true:
        idx = idx + (idx >= pos)
    return pool[idx], False


class BatchNegativeSampler:
    """Vectorized per-position sampling for training batches.

    Positions are grouped by category; each group draws uniform k-subsets
    (or with-replacement draws for tiny pools) in one shot. Singleton or
    missing categories fall back to random sampling and are counted.
    """

    def __init__(self, table: CategoryItemTable, n_items: int, strategy: str, rng: np.random.Generator):
        if strategy not in ("cs", "rs"):
            raise ValueError(f"unknown sampling strategy {strategy!r}")
        self.table = table
        self.n_items = n_items
        self.strategy = strategy
        self.rng = rng
        self.fallback_count = 0

    def _rs_block(self, true_items: np.ndarray, k: int) -> np.ndarray:
        r = self.rng.integers(0, self.n_items - 1, size=(true_items.size, k))
        return r + (r >= true_items[:, None])

    def sample(self, categories: np.ndarray, true_items: np.ndarray, k: int) -> np.ndarray:
        """Negatives of shape (P, k) for P positions."""
        P = true_items.size
        if self.strategy == "rs":
            return self._rs_block(true_items, k)
        out = np.empty((P, k), dtype=np.int64)
        for c in np.unique(categories):
            sel = np.flatnonzero(categories == c)
            pool = self.table.get(int(c))
            if pool is None or pool.size <= 1:
                out[sel] = self._rs_block(true_items[sel], k)
                self.fallback_count += sel.size
                continue
            pos = np.searchsorted(pool, true_items[sel])
            has_true = (pos < pool.size) & (pool[np.minimum(pos, pool.size - 1)] == true_items[sel])
            m = pool.size - 1
            if m >= k:
                keys = self.rng.random((sel.size, m))
                idx = np.argsort(keys, axis=1, kind="mergesort")[:, :k]
            else:
                idx = self.rng.integers(0, m, size=(sel.size, k))
            idx = idx + (has_true[:, None] & (idx >= pos[:, None]))
            out[sel] = pool[idx]
        return out


# -- losses ----------------------------------------------------------------------

def position_loss(h_t: Tensor, true_item: int, negatives: np.ndarray, item_table: EmbeddingTable) -> Tensor:
    """Sampled-softmax cross entropy for one slot: true item at index 0."""
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.size < 1:
        raise ValueError("need at least one negative")
    cand = np.concatenate([[true_item], negatives])
    emb = item_table.lookup(cand)  # (k+1, d)
    logits = reshape(matmul(emb, reshape(h_t, (h_t.shape[0], 1))), (cand.size,))
    onehot = np.zeros(cand.size)
    onehot[0] = 1.0
    return logsumexp(logits, axis=-1) - tsum(mul(logits, onehot))


def _candidate_ce(rows: Tensor, cand_ids: np.ndarray, item_table: EmbeddingTable) -> Tensor:
    """Cross entropy per slot for stacked candidates; true id sits at index 0.

    rows: (B, L, d); cand_ids: (B, L, k+1) -> returns (B, L).
    """
    B, L, d = rows.shape
    kp1 = cand_ids.shape[-1]
    cand = item_table.lookup(cand_ids)  # (B, L, k+1, d)
    logits = reshape(
        matmul(reshape(rows, (B, L, 1, d)), transpose(cand, (0, 1, 3, 2))), (B, L, kp1)
    )
    onehot = np.zeros(kp1)
    onehot[0] = 1.0
    return logsumexp(logits, axis=-1) - tsum(mul(logits, onehot), axis=-1)


def sequence_loss(
    tables: dict[str, EmbeddingTable],
    dec_params: dict[str, Tensor],
    dec_cfg: DecoderConfig,
    record: PretrainRecord,
    sampler: BatchNegativeSampler,
    k: int,
    decoder_mode: str = "cd",
) -> Tensor | None:
    """Mean per-position loss for one sequence; None for an empty history."""
    L = record.seq_len
    if L == 0:
        return None
    items = record.behavior_items.reshape(1, L)
    cats = record.behavior_cats.reshape(1, L)
    lengths = np.array([L], dtype=np.int64)
    rows = decode_rows(tables, dec_params, dec_cfg, items, cats, lengths, mode=decoder_mode)
    negs = sampler.sample(cats.reshape(-1), items.reshape(-1), k).reshape(1, L, k)
    cand = np.concatenate([items[:, :, None], negs], axis=2)
    ce = _candidate_ce(rows, cand, tables["item"])
    return mul(tsum(ce), 1.0 / L)


@dataclass
class PretrainResult:
    tables: dict[str, EmbeddingTable]
    dec_params: dict[str, Tensor]
    dec_cfg: DecoderConfig
    log: list[dict] = field(default_factory=list)


def _registry(tables: dict[str, EmbeddingTable], dec_params: dict[str, Tensor]) -> dict[str, Tensor]:
    reg = {f"emb.{name}": t.weights for name, t in tables.items()}
    reg.update({f"dec.{name}": p for name, p in dec_params.items()})
    return reg


def _batch_arrays(records: list[PretrainRecord]):
    lengths = np.array([r.seq_len for r in records], dtype=np.int64)
    L = int(lengths.max())
    items = np.zeros((len(records), L), dtype=np.int64)
    cats = np.zeros((len(records), L), dtype=np.int64)
    for i, r in enumerate(records):
        items[i, : r.seq_len] = r.behavior_items
        cats[i, : r.seq_len] = r.behavior_cats
    return items, cats, lengths


def _batch_loss(
    tables, dec_params, dec_cfg, items, cats, lengths, sampler, k, decoder_mode
) -> Tensor:
    B, L = items.shape
    valid = np.arange(L)[None, :] < lengths[:, None]
    flat = np.flatnonzero(valid.reshape(-1))
    negs_flat = sampler.sample(cats.reshape(-1)[flat], items.reshape(-1)[flat], k)
    negs = np.zeros((B * L, k), dtype=np.int64)
    negs[flat] = negs_flat
    cand = np.concatenate([items.reshape(B, L, 1), negs.reshape(B, L, k)], axis=2)

    rows = decode_rows(tables, dec_params, dec_cfg, items, cats, lengths, mode=decoder_mode)
    ce = _candidate_ce(rows, cand, tables["item"])
    # per-sequence position mean, then batch mean; padded slots weigh zero
    w = valid / lengths[:, None] / B
    return tsum(mul(ce, w))


def corpus_mean_loss(
    corpus: list[PretrainRecord],
    tables,
    dec_params,
    dec_cfg,
    sampler: BatchNegativeSampler,
    k: int,
    decoder_mode: str,
    batch_size: int = 32,
) -> float:
    """Mean per-sequence loss over a corpus without updating anything."""
    nonempty = [r for r in corpus if r.seq_len > 0]
    total = 0.0
    for start in range(0, len(nonempty), batch_size):
        chunk = nonempty[start : start + batch_size]
        items, cats, lengths = _batch_arrays(chunk)
        loss = _batch_loss(tables, dec_params, dec_cfg, items, cats, lengths, sampler, k, decoder_mode)
        total += loss.item() * len(chunk)
    return total / len(nonempty)


def pretrain(
    corpus: list[PretrainRecord],
    table: CategoryItemTable,
    vocab: VocabSpec,
    cfg: PretrainConfig,
    dec_cfg: DecoderConfig | None = None,
) -> PretrainResult:
    """Run generative pretraining; deterministic for a given config."""
    if not corpus:
        raise ValueError("pretrain corpus is empty")
    dec_cfg = dec_cfg or DecoderConfig(model_dim=cfg.embed_dim)
    sampling, decoder_mode = split_mode(cfg.mode)
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(cfg.seed)))

    tables = init_tables(vocab, cfg.embed_dim, rng)
    dec_params = init_decoder_params(dec_cfg, rng)
    opt = Adam(_registry(tables, dec_params), lr=cfg.lr)
    sampler = BatchNegativeSampler(table, vocab.n_items, sampling, rng)

    records = [r for r in corpus if r.seq_len > 0]
    if not records:
        raise ValueError("pretrain corpus has no non-empty sequences")

    result = PretrainResult(tables, dec_params, dec_cfg)
    n = len(records)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        fallback_start = sampler.fallback_count
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = [records[i] for i in order[start : start + cfg.batch_size]]
            items, cats, lengths = _batch_arrays(chunk)
            loss = _batch_loss(
                tables, dec_params, dec_cfg, items, cats, lengths, sampler, cfg.k_negatives, decoder_mode
            )
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item() * len(chunk)
        result.log.append(
            {
                "epoch": epoch,
                "mean_loss": total / n,
                "cs_fallback_count": sampler.fallback_count - fallback_start,
            }
        )
    return result


def uniform_loss_bound(k: int) -> float:
    """Loss at exactly uniform logits: ln(k+1)."""
    return math.log(k + 1)

"""Embedding tables for items, categories, positions, and user features.

All tables in one model share a single embedding width (16 by default).
Position indices are anchored at the sequence end: the most recent token
has index 0, so truncating long histories never shifts existing indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather_rows

EMBED_DIM = 16
MAX_SEQ_LEN = 200


@dataclass(frozen=True)
class VocabSpec:
    """Cardinalities of every id space the model embeds."""

    n_items: int
    n_categories: int
    user_feature_cards: tuple[int, ...] = ()
    max_seq_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.n_items < 1 or self.n_categories < 1 or self.max_seq_len < 1:
            raise ValueError("all cardinalities must be >= 1")
        if any(c < 1 for c in self.user_feature_cards):
            raise ValueError("user feature cardinalities must be >= 1")


@dataclass
class EmbeddingTable:
    """A named trainable lookup table of shape (rows, dim)."""

    name: str
    weights: Tensor
    trainable: bool = True
    _rows: int = field(init=False)
    _dim: int = field(init=False)

    def __post_init__(self):
        self._rows, self._dim = self.weights.data.shape

    @property
    def rows(self) -> int:
        return self._rows

    @property
    def dim(self) -> int:
        return self._dim

    def lookup(self, ids) -> Tensor:
        """Embed integer ids (any shape); output gains a trailing dim axis.

        Gradients accumulate only into the rows that were looked up.
        """
        idx = np.asarray(ids, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self._rows):
            bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
            raise IndexError(
                f"id {bad} out of range for table {self.name!r} with {self._rows} rows"
            )
        return gather_rows(self.weights, idx)


def _init_weights(rng: np.random.Generator, rows: int, dim: int) -> Tensor:
    # zero-mean uniform with scale 1/sqrt(dim)
    scale = 1.0 / np.sqrt(dim)
    return Tensor(rng.uniform(-scale, scale, size=(rows, dim)), requires_grad=True)


def init_tables(
    spec: VocabSpec, dim: int = EMBED_DIM, rng: np.random.Generator | None = None
) -> dict[str, EmbeddingTable]:
    """Build every table a model needs, deterministically for a given rng.

    Returns a dict keyed by canonical names: ``item``, ``category``,
    ``position``, and ``user{j}`` per user feature slot.
    """
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    tables: dict[str, EmbeddingTable] = {}
    tables["item"] = EmbeddingTable("item", _init_weights(rng, spec.n_items, dim))
    tables["category"] = EmbeddingTable("category", _init_weights(rng, spec.n_categories, dim))
    tables["position"] = EmbeddingTable("position", _init_weights(rng, spec.max_seq_len, dim))
    for j, card in enumerate(spec.user_feature_cards):
        name = f"user{j}"
        tables[name] = EmbeddingTable(name, _init_weights(rng, card, dim))
    return tables

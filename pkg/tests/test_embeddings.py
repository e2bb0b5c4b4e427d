"""Embedding tables: lookup gradients, init determinism, vocab handling."""

import numpy as np
import pytest

from seqctr.autodiff import backward, tsum
from seqctr.embeddings import VocabSpec, init_tables

VOCAB = VocabSpec(n_items=30, n_categories=6, user_feature_cards=(4, 5), max_seq_len=200)


def test_lookup_backward_is_ones_on_that_row():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(0))
    item = tables["item"]
    backward(tsum(item.lookup(7)))
    grad = item.weights.grad
    assert np.array_equal(grad[7], np.ones(16))
    mask = np.ones(30, dtype=bool)
    mask[7] = False
    assert np.all(grad[mask] == 0.0)


def test_repeated_lookup_accumulates():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(0))
    item = tables["item"]
    backward(tsum(item.lookup(3) + item.lookup(3)))
    assert np.array_equal(item.weights.grad[3], 2.0 * np.ones(16))


def test_out_of_range_lookup_names_table():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(0))
    with pytest.raises(IndexError, match="item"):
        tables["item"].lookup(30)
    with pytest.raises(IndexError, match="category"):
        tables["category"].lookup(-1)


def test_same_seed_bit_identical():
    t1 = init_tables(VOCAB, dim=16, rng=np.random.default_rng(99))
    t2 = init_tables(VOCAB, dim=16, rng=np.random.default_rng(99))
    assert set(t1) == set(t2)
    for name in t1:
        assert np.array_equal(t1[name].weights.data, t2[name].weights.data)


def test_all_tables_width_16():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(1))
    assert {t.dim for t in tables.values()} == {16}


def test_position_table_has_200_rows():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(1))
    assert tables["position"].rows == 200


def test_expected_table_set():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(1))
    assert set(tables) == {"item", "category", "position", "user0", "user1"}
    assert tables["user0"].rows == 4
    assert tables["user1"].rows == 5


def test_gradient_sparsity_in_batch():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(2))
    item = tables["item"]
    ids = np.array([[1, 5], [5, 9]])
    backward(tsum(item.lookup(ids) * 2.0))
    touched = {1, 5, 9}
    for row in range(30):
        if row in touched:
            assert np.any(item.weights.grad[row] != 0.0)
        else:
            assert np.all(item.weights.grad[row] == 0.0)


def test_init_scale_is_inv_sqrt_dim():
    tables = init_tables(VOCAB, dim=16, rng=np.random.default_rng(3))
    w = tables["item"].weights.data
    bound = 1.0 / np.sqrt(16)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually fills the range
    assert abs(w.mean()) < 0.02


def test_vocab_spec_validation():
    with pytest.raises(ValueError):
        VocabSpec(n_items=0, n_categories=1)
    with pytest.raises(ValueError):
        VocabSpec(n_items=5, n_categories=2, user_feature_cards=(0,))


def test_bad_dim_rejected():
    with pytest.raises(ValueError):
        init_tables(VOCAB, dim=0, rng=np.random.default_rng(0))

"""Generator determinism and planted signal; table/pretrain builders; file IO."""

import numpy as np
import pytest

from seqctr.data import (
    DataFormatError,
    Example,
    GeneratorConfig,
    build_category_item_table,
    build_pretrain_set,
    generate,
    load_bundle,
    load_examples,
    load_table,
    save_bundle,
    save_examples,
)

TINY = GeneratorConfig(
    n_users=50, n_items=60, n_categories=6, n_train=400, n_test=150,
    seq_len_min=6, seq_len_max=18, seed=5,
)


def ex(uid, item, cat, behavior, label=0, uf=(0, 0, 0)):
    items = np.array([i for i, _ in behavior], dtype=np.int64)
    cats = np.array([c for _, c in behavior], dtype=np.int64)
    return Example(uid, tuple(uf), item, cat, items, cats, label)


class TestGenerate:
    def test_same_seed_byte_identical_files(self, tmp_path):
        b1, _, r1 = generate(TINY)
        b2, _, r2 = generate(TINY)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_bundle(b1, d1, r1)
        save_bundle(b2, d2, r2)
        for name in ("train.txt", "test.txt", "pretrain.txt", "cat_item_table.txt", "generator.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        b1, _, _ = generate(TINY)
        b2, _, _ = generate(GeneratorConfig(**{**TINY.__dict__, "seed": 6}))
        assert any(
            a.target_item != b.target_item or a.label != b.label
            for a, b in zip(b1.train, b2.train)
        )

    def test_sequences_respect_cap(self):
        cfg = GeneratorConfig(
            n_users=30, n_items=60, n_categories=6, n_train=200, n_test=50,
            seq_len_min=40, seq_len_max=60, max_seq_len=32, seed=1,
        )
        bundle, _, _ = generate(cfg)
        assert max(ex.seq_len for ex in bundle.train + bundle.test) <= 32

    def test_oracle_auc_beats_floor_at_default_scale(self, default_bundle):
        _, _, report = default_bundle
        assert report.oracle_auc_test >= 0.75
        assert report.oracle_auc_train >= 0.75

    def test_cs_feasibility_at_default_scale(self, default_bundle):
        _, _, report = default_bundle
        assert report.cs_feasible_frac >= 0.99

    def test_planted_signal_margin_recorded(self):
        _, _, report = generate(TINY)
        assert report.oracle_auc_test > 0.55  # strictly dominates random

    def test_later_day_split(self):
        bundle, _, _ = generate(TINY)
        train_cut = {}
        test_cut = {}
        for e in bundle.train:
            train_cut[e.user_id] = max(train_cut.get(e.user_id, 0), e.seq_len)
        for e in bundle.test:
            test_cut[e.user_id] = min(test_cut.get(e.user_id, 10**9), e.seq_len)
        shared = set(train_cut) & set(test_cut)
        assert shared
        assert all(test_cut[u] > train_cut[u] for u in shared)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_items=3, n_categories=5)
        with pytest.raises(ValueError):
            GeneratorConfig(train_day_frac=1.0)
        with pytest.raises(ValueError):
            GeneratorConfig(seq_len_min=1)


class TestTableBuilder:
    def test_dedup_and_sort(self):
        train = [ex(0, 1, 0, [(2, 0), (1, 0)]), ex(1, 2, 0, [(1, 0)])]
        table = build_category_item_table(train)
        assert table[0].tolist() == [1, 2]

    def test_union_equals_distinct_train_items(self):
        bundle, _, _ = generate(TINY)
        table = build_category_item_table(bundle.train)
        seen = set()
        for e in bundle.train:
            seen.add(e.target_item)
            seen.update(e.behavior_items.tolist())
        assert set(np.concatenate(list(table.values())).tolist()) == seen

    def test_rebuild_identical(self):
        bundle, _, _ = generate(TINY)
        t1 = build_category_item_table(bundle.train)
        t2 = build_category_item_table(bundle.train)
        assert t1.keys() == t2.keys()
        assert all(np.array_equal(t1[c], t2[c]) for c in t1)

    def test_conflicting_category_raises(self):
        train = [ex(0, 1, 0, []), ex(1, 1, 2, [])]
        with pytest.raises(ValueError, match="item 1"):
            build_category_item_table(train)


class TestPretrainSet:
    def test_dedup_to_one_record(self):
        rows = [ex(7, 1, 0, [(1, 0)] * n) for n in (2, 5, 3, 4, 1)]
        records = build_pretrain_set(rows)
        assert len(records) == 1
        assert records[0].seq_len == 5

    def test_count_equals_distinct_users(self):
        bundle, _, _ = generate(TINY)
        assert len(bundle.pretrain) == len({e.user_id for e in bundle.train})

    def test_keeps_longest_history_direct_scan(self):
        bundle, _, _ = generate(TINY)
        best = {}
        for e in bundle.train:
            if e.user_id not in best or e.seq_len > best[e.user_id]:
                best[e.user_id] = e.seq_len
        for rec in bundle.pretrain:
            assert rec.seq_len == best[rec.user_id]


class TestIO:
    def test_round_trip_lossless(self, tmp_path):
        bundle, _, report = generate(TINY)
        save_bundle(bundle, tmp_path, report)
        loaded = load_bundle(tmp_path)
        assert loaded.vocab == bundle.vocab
        assert len(loaded.train) == len(bundle.train)
        for a, b in zip(bundle.train + bundle.test, loaded.train + loaded.test):
            assert a.user_id == b.user_id
            assert a.user_features == b.user_features
            assert a.target_item == b.target_item
            assert a.target_category == b.target_category
            assert a.label == b.label
            assert np.array_equal(a.behavior_items, b.behavior_items)
            assert np.array_equal(a.behavior_cats, b.behavior_cats)
        for a, b in zip(bundle.pretrain, loaded.pretrain):
            assert a.user_id == b.user_id
            assert np.array_equal(a.behavior_items, b.behavior_items)
        assert bundle.cat_item_table.keys() == loaded.cat_item_table.keys()
        for c in bundle.cat_item_table:
            assert np.array_equal(bundle.cat_item_table[c], loaded.cat_item_table[c])

    def test_truncated_line_reports_line_number(self, tmp_path):
        bundle, _, _ = generate(TINY)
        path = tmp_path / "train.txt"
        save_examples(path, bundle.train[:5], bundle.vocab)
        lines = path.read_text().splitlines()
        lines[3] = "\t".join(lines[3].split("\t")[:3])  # drop fields on line 4
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match=r":4: "):
            load_examples(path)

    def test_unknown_version_refused(self, tmp_path):
        bundle, _, _ = generate(TINY)
        path = tmp_path / "train.txt"
        save_examples(path, bundle.train[:2], bundle.vocab)
        text = path.read_text().replace("#seqctr-data v1", "#seqctr-data v9", 1)
        path.write_text(text)
        with pytest.raises(DataFormatError, match="version"):
            load_examples(path)

    def test_malformed_pair_rejected(self, tmp_path):
        bundle, _, _ = generate(TINY)
        path = tmp_path / "train.txt"
        save_examples(path, bundle.train[:2], bundle.vocab)
        lines = path.read_text().splitlines()
        fields = lines[1].split("\t")
        fields[4] = "12-3"
        lines[1] = "\t".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="behavior pair"):
            load_examples(path)

    def test_out_of_range_ids_rejected(self, tmp_path):
        bundle, _, _ = generate(TINY)
        path = tmp_path / "train.txt"
        save_examples(path, bundle.train[:2], bundle.vocab)
        lines = path.read_text().splitlines()
        fields = lines[1].split("\t")
        fields[2] = "60"  # n_items == 60, so max valid id is 59
        lines[1] = "\t".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="out of range"):
            load_examples(path)

    def test_bad_label_rejected(self, tmp_path):
        bundle, _, _ = generate(TINY)
        path = tmp_path / "train.txt"
        save_examples(path, bundle.train[:2], bundle.vocab)
        lines = path.read_text().splitlines()
        fields = lines[1].split("\t")
        fields[5] = "2"
        lines[1] = "\t".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="label"):
            load_examples(path)

    def test_duplicate_table_category_rejected(self, tmp_path):
        path = tmp_path / "cat_item_table.txt"
        path.write_text(
            "#seqctr-data v1 kind=cat_item_table n_items=10 n_categories=2 user_cards=- max_seq_len=200\n"
            "0\t1,2\n0\t3\n"
        )
        with pytest.raises(DataFormatError, match="duplicate"):
            load_table(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_bundle(tmp_path)

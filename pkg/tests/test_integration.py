"""Fusion mechanics: config lattice, PS/MI transfer, slot isolation, training."""

import math

import numpy as np
import pytest

from seqctr.autodiff import backward
from seqctr.checkpoint import load_checkpoint, save_checkpoint
from seqctr.data import GeneratorConfig, generate
from seqctr.decoder import DecoderConfig
from seqctr.embeddings import EMBED_DIM
from seqctr.integration import (
    CtrModel,
    IntegrationConfig,
    IntegrationError,
    TrainConfig,
    apply_model_inheritance,
    apply_parameter_sharing,
    apply_transfers,
    bce_loss,
    evaluate,
    load_model,
    make_batch,
    predict,
    train_ctr,
)
from seqctr.pretrain import PretrainConfig, pretrain


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    cfg = GeneratorConfig(
        n_users=60, n_items=80, n_categories=8, n_train=500, n_test=200,
        seq_len_min=6, seq_len_max=16, seed=21,
    )
    bundle, _, _ = generate(cfg)
    ckpts = {}
    base = tmp_path_factory.mktemp("pretrain")
    for mode in ("cs+cd", "cs+sd"):
        result = pretrain(
            bundle.pretrain, bundle.cat_item_table, bundle.vocab,
            PretrainConfig(mode=mode, epochs=1, batch_size=4, seed=3),
        )
        arrays = {f"emb.{n}": t.weights.data for n, t in result.tables.items()}
        arrays.update({f"dec.{n}": p.data for n, p in result.dec_params.items()})
        meta = {"kind": "pretrain", "mode": mode}
        meta.update(result.dec_cfg.meta())
        path = base / f"{mode.replace('+', '_')}.ckpt"
        save_checkpoint(path, arrays, meta)
        ckpts[mode] = path
    return bundle, ckpts


ROW_CONFIGS = {
    1: IntegrationConfig(backbone="dnn"),
    2: IntegrationConfig(backbone="dnn", ps=True, pretrain_mode="cs+cd"),
    3: IntegrationConfig(backbone="dnn", decoder_attached=True),
    4: IntegrationConfig(backbone="dnn", decoder_attached=True, ps=True, pretrain_mode="cs+cd"),
    5: IntegrationConfig(backbone="dnn", decoder_attached=True, ps=True, mi=True, pretrain_mode="cs+cd"),
    6: IntegrationConfig(backbone="dnn", decoder_attached=True, ps=True, mi=True, pretrain_mode="cs+sd"),
    7: IntegrationConfig(backbone="dnn", decoder_attached=True, ps=True, mi=True, pretrain_mode="rs+cd"),
    8: IntegrationConfig(backbone="dnn", decoder_attached=True, ps=True, mi=True, pretrain_mode="rs+sd"),
}


class TestConfigLattice:
    def test_rows_map_injectively(self):
        seen = set()
        for row, cfg in ROW_CONFIGS.items():
            cfg.validate()
            key = (cfg.decoder_attached, cfg.ps, cfg.mi, cfg.pretrain_mode)
            assert key not in seen
            seen.add(key)

    def test_mi_requires_decoder(self):
        with pytest.raises(IntegrationError):
            IntegrationConfig(backbone="dnn", mi=True, pretrain_mode="cs+cd").validate()

    def test_ps_requires_pretrain_mode(self):
        with pytest.raises(IntegrationError):
            IntegrationConfig(backbone="dnn", ps=True).validate()

    def test_decoder_mode_follows_pretrain_flavor(self):
        assert ROW_CONFIGS[5].decoder_mode == "cd"
        assert ROW_CONFIGS[6].decoder_mode == "sd"
        assert ROW_CONFIGS[3].decoder_mode == "cd"
        assert ROW_CONFIGS[4].decoder_mode == "cd"


class TestParameterSharing:
    def test_rows_bit_equal_after_transfer(self, tiny_world):
        bundle, ckpts = tiny_world
        meta, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], np.random.default_rng(0))
        apply_parameter_sharing(model, arrays)
        assert np.array_equal(model.tables["item"].weights.data, arrays["emb.item"])
        assert np.array_equal(model.tables["category"].weights.data, arrays["emb.category"])

    def test_copy_is_independent(self, tiny_world):
        bundle, ckpts = tiny_world
        _, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], np.random.default_rng(0))
        apply_parameter_sharing(model, arrays)
        before = arrays["emb.item"].copy()
        model.tables["item"].weights.data[0, 0] += 1.0
        assert np.array_equal(arrays["emb.item"], before)

    def test_missing_checkpoint_errors(self, tiny_world):
        bundle, _ = tiny_world
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], np.random.default_rng(0))
        with pytest.raises(IntegrationError, match="checkpoint"):
            apply_transfers(model, None)

    def test_vocab_mismatch_lists_cardinalities(self, tiny_world):
        bundle, ckpts = tiny_world
        _, arrays = load_checkpoint(ckpts["cs+cd"])
        arrays = dict(arrays)
        arrays["emb.item"] = arrays["emb.item"][:-3]
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], np.random.default_rng(0))
        with pytest.raises(IntegrationError, match="vocab mismatch"):
            apply_parameter_sharing(model, arrays)

    def test_shared_rows_stay_trainable(self, tiny_world):
        bundle, ckpts = tiny_world
        _, arrays = load_checkpoint(ckpts["cs+cd"])
        rng = np.random.default_rng(1)
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], rng)
        apply_parameter_sharing(model, arrays)
        before = model.tables["item"].weights.data.copy()
        train_ctr(model, bundle.train[:64], TrainConfig(epochs=1, batch_size=32), rng)
        assert not np.array_equal(before, model.tables["item"].weights.data)


class TestModelInheritance:
    def test_decoder_weights_bit_equal(self, tiny_world):
        bundle, ckpts = tiny_world
        meta, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(bundle.vocab, ROW_CONFIGS[5], np.random.default_rng(0))
        apply_model_inheritance(model, meta, arrays)
        for name, p in model.dec_params.items():
            assert np.array_equal(p.data, arrays[f"dec.{name}"])
        assert np.array_equal(model.tables["position"].weights.data, arrays["emb.position"])

    def test_fresh_decoder_differs_from_checkpoint(self, tiny_world):
        bundle, ckpts = tiny_world
        _, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(bundle.vocab, ROW_CONFIGS[4], np.random.default_rng(0))
        apply_transfers(model, ckpts["cs+cd"])  # PS only: mi=False
        assert not np.array_equal(model.dec_params["l0.wq"].data, arrays["dec.l0.wq"])

    def test_requires_decoder_attached(self, tiny_world):
        bundle, ckpts = tiny_world
        meta, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(bundle.vocab, ROW_CONFIGS[2], np.random.default_rng(0))
        with pytest.raises(IntegrationError):
            apply_model_inheritance(model, meta, arrays)

    def test_config_mismatch_errors(self, tiny_world):
        bundle, ckpts = tiny_world
        meta, arrays = load_checkpoint(ckpts["cs+cd"])
        model = CtrModel(
            bundle.vocab, ROW_CONFIGS[5], np.random.default_rng(0),
            DecoderConfig(n_heads=4),
        )
        with pytest.raises(IntegrationError, match="mismatch"):
            apply_model_inheritance(model, meta, arrays)

    def test_mode_mismatch_caught(self, tiny_world):
        bundle, ckpts = tiny_world
        model = CtrModel(bundle.vocab, ROW_CONFIGS[5], np.random.default_rng(0))
        with pytest.raises(IntegrationError, match="mode"):
            apply_transfers(model, ckpts["cs+sd"])


from conftest import slice_detached_twin


class TestIntegratedForward:
    @pytest.mark.parametrize("backbone", ["dnn", "dcnv2", "dcnv2_ta"])
    def test_zero_slot_equals_detached_forward_bitwise(self, tiny_world, backbone):
        bundle, ckpts = tiny_world
        cfg = IntegrationConfig(
            backbone=backbone, decoder_attached=True, ps=True, mi=True, pretrain_mode="cs+cd"
        )
        attached = CtrModel(bundle.vocab, cfg, np.random.default_rng(7))
        apply_transfers(attached, ckpts["cs+cd"])
        # give the zero-initialized heads generic values so the check has teeth
        rng = np.random.default_rng(8)
        attached.bb_params["head.w"].data = rng.normal(size=attached.bb_params["head.w"].shape) * 0.3
        attached.bb_params["head.b"].data = rng.normal(size=1)
        twin = slice_detached_twin(attached, bundle)
        batch = make_batch(bundle.test[:40])
        zeros = np.zeros((batch.size, EMBED_DIM))
        a = attached.forward(batch, g_override=zeros).data
        b = twin.forward(batch).data
        assert np.array_equal(a, b)

    def test_probabilities_strictly_inside_unit_interval(self, tiny_world):
        bundle, _ = tiny_world
        model = CtrModel(bundle.vocab, ROW_CONFIGS[3], np.random.default_rng(2))
        model.bb_params["head.w"].data[:] = 50.0  # force extreme logits
        probs = predict(model, bundle.test[:64])
        assert np.all(probs > 0.0)
        assert np.all(probs < 1.0)

    def test_sequence_blind_without_decoder(self, tiny_world):
        bundle, _ = tiny_world
        for backbone in ("dnn", "dcnv2"):
            model = CtrModel(
                bundle.vocab, IntegrationConfig(backbone=backbone), np.random.default_rng(3)
            )
            model.bb_params["head.w"].data = np.random.default_rng(4).normal(
                size=model.bb_params["head.w"].shape
            )
            batch = make_batch(bundle.test[:16])
            base = model.forward(batch).data
            batch.seq_items = np.zeros_like(batch.seq_items)
            batch.seq_cats = np.zeros_like(batch.seq_cats)
            batch.lengths = np.zeros_like(batch.lengths)
            after = model.forward(batch).data
            assert np.array_equal(base, after)

    def test_ta_backbone_sees_sequence(self, tiny_world):
        bundle, _ = tiny_world
        model = CtrModel(
            bundle.vocab, IntegrationConfig(backbone="dcnv2_ta"), np.random.default_rng(5)
        )
        model.bb_params["head.w"].data = np.random.default_rng(6).normal(
            size=model.bb_params["head.w"].shape
        )
        batch = make_batch([e for e in bundle.test[:16] if e.seq_len > 0])
        base = model.forward(batch).data
        batch.seq_items = (batch.seq_items + 1) % bundle.vocab.n_items
        after = model.forward(batch).data
        assert not np.array_equal(base, after)

    def test_gradient_reaches_decoder_params(self, tiny_world):
        bundle, ckpts = tiny_world
        model = CtrModel(bundle.vocab, ROW_CONFIGS[5], np.random.default_rng(9))
        apply_transfers(model, ckpts["cs+cd"])
        model.bb_params["head.w"].data = np.random.default_rng(10).normal(
            size=model.bb_params["head.w"].shape
        )
        batch = make_batch(bundle.train[:16])
        loss = bce_loss(model.forward(batch), batch.labels)
        backward(loss)
        assert any(
            p.grad is not None and np.any(p.grad != 0.0) for p in model.dec_params.values()
        )


class TestTrainer:
    def test_initial_loss_is_ln2(self, tiny_world):
        bundle, _ = tiny_world
        rng = np.random.default_rng(11)
        model = CtrModel(bundle.vocab, ROW_CONFIGS[1], rng)
        log = train_ctr(model, bundle.train[:32], TrainConfig(epochs=1, batch_size=32), rng)
        assert abs(log.initial_loss - math.log(2)) < 1e-12

    def test_same_seed_bit_identical_metrics(self, tiny_world):
        bundle, ckpts = tiny_world

        def run():
            rng = np.random.default_rng(12)
            model = CtrModel(bundle.vocab, ROW_CONFIGS[5], rng)
            apply_transfers(model, ckpts["cs+cd"])
            log = train_ctr(model, bundle.train[:128], TrainConfig(epochs=1, batch_size=8), rng)
            res = evaluate(model, bundle.test[:100])
            return log.epoch_losses, res.auc, res.logloss

        assert run() == run()

    def test_loss_improves_at_least_5_percent(self, tiny_world):
        bundle, _ = tiny_world
        rng = np.random.default_rng(13)
        model = CtrModel(bundle.vocab, ROW_CONFIGS[1], rng)
        log = train_ctr(model, bundle.train, TrainConfig(epochs=3, batch_size=8), rng)
        assert log.final_loss < 0.95 * log.initial_loss

    def test_empty_training_set_errors(self, tiny_world):
        bundle, _ = tiny_world
        model = CtrModel(bundle.vocab, ROW_CONFIGS[1], np.random.default_rng(14))
        with pytest.raises(ValueError):
            train_ctr(model, [], TrainConfig())

    def test_freeze_flag_pins_transferred_params(self, tiny_world):
        bundle, ckpts = tiny_world
        cfg = IntegrationConfig(
            backbone="dnn", decoder_attached=True, ps=True, mi=True,
            pretrain_mode="cs+cd", freeze_transferred=True,
        )
        rng = np.random.default_rng(15)
        model = CtrModel(bundle.vocab, cfg, rng)
        apply_transfers(model, ckpts["cs+cd"])
        item_before = model.tables["item"].weights.data.copy()
        dec_before = model.dec_params["l0.wq"].data.copy()
        train_ctr(model, bundle.train[:64], TrainConfig(epochs=1, batch_size=16), rng)
        assert np.array_equal(item_before, model.tables["item"].weights.data)
        assert np.array_equal(dec_before, model.dec_params["l0.wq"].data)


class TestModelCheckpoint:
    def test_save_load_round_trip(self, tiny_world, tmp_path):
        bundle, ckpts = tiny_world
        rng = np.random.default_rng(16)
        model = CtrModel(bundle.vocab, ROW_CONFIGS[5], rng)
        apply_transfers(model, ckpts["cs+cd"])
        train_ctr(model, bundle.train[:64], TrainConfig(epochs=1, batch_size=16), rng)
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = load_model(path)
        assert loaded.cfg == model.cfg
        probs_a = predict(model, bundle.test[:50])
        probs_b = predict(loaded, bundle.test[:50])
        assert np.array_equal(probs_a, probs_b)

    def test_integrated_gradcheck(self, tiny_world):
        bundle, ckpts = tiny_world
        from conftest import fd_check

        cfg = IntegrationConfig(
            backbone="dnn", decoder_attached=True, ps=True, mi=True, pretrain_mode="cs+cd"
        )
        rng = np.random.default_rng(17)
        model = CtrModel(bundle.vocab, cfg, rng)
        apply_transfers(model, ckpts["cs+cd"])
        model.bb_params["head.w"].data = rng.normal(size=model.bb_params["head.w"].shape) * 0.2
        batch = make_batch(bundle.train[:6])

        def build():
            return bce_loss(model.forward(batch), batch.labels)

        params = dict(list(model.params().items())[::7])  # spot-check a spread
        fd_check(build, params, rng, entries_per_param=3)

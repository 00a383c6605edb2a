"""Tests for config validation, model building, and the batch forward pass."""

import logging

import numpy as np
import pytest

from beatformer.errors import ConfigError, ShapeError
from beatformer.model import (
    REFERENCE_PARAM_COUNT,
    ModelConfig,
    build_model,
    count_params,
    format_param_report,
    forward,
    forward_sample,
    parameter_breakdown,
    tiny_config,
)


class TestModelConfig:
    def test_default_is_valid(self):
        assert ModelConfig().validate() == []

    def test_all_violations_reported_at_once(self):
        cfg = ModelConfig(d_model=0, heads=-1, mlp_units=(), n_classes=1, dropout_p=1.5,
                          positional="nope")
        violations = cfg.validate()
        assert len(violations) >= 6
        with pytest.raises(ConfigError) as err:
            build_model(cfg)
        for key in ("d_model", "heads", "mlp_units", "n_classes", "dropout_p", "positional"):
            assert key in str(err.value)

    def test_token_count(self):
        assert ModelConfig(input_len=187, patch_len=11).n_tokens == 17
        assert ModelConfig(input_len=185, patch_len=11).n_tokens == 17
        assert ModelConfig(input_len=44, patch_len=11).n_tokens == 4

    def test_dict_roundtrip(self):
        cfg = ModelConfig(d_model=12, mlp_units=(7, 3), seed=42, positional="sinusoidal")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuildModel:
    def test_same_seed_bit_identical(self):
        a = build_model(ModelConfig(seed=5))
        b = build_model(ModelConfig(seed=5))
        for (name_a, ta), (name_b, tb) in zip(a.parameters(), b.parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a = build_model(tiny_config(seed=1))
        b = build_model(tiny_config(seed=2))
        assert not np.array_equal(a.embed_w.data, b.embed_w.data)

    def test_biases_and_positional_start_at_zero(self):
        model = build_model(tiny_config())
        np.testing.assert_array_equal(model.embed_b.data, 0.0)
        np.testing.assert_array_equal(model.pos_table.data, 0.0)
        np.testing.assert_array_equal(model.blocks[0].ln1_gamma.data, 1.0)

    def test_sinusoidal_positional_is_fixed(self):
        model = build_model(tiny_config(positional="sinusoidal"))
        assert not model.pos_table.needs_grad
        assert "pos.table" not in dict(model.parameters())
        assert model.pos_table.data.max() <= 1.0

    def test_learned_positional_is_trainable(self):
        model = build_model(tiny_config())
        assert model.pos_table.needs_grad
        assert "pos.table" in dict(model.parameters())


class TestParamCounts:
    def test_single_bias_vector(self):
        model = build_model(tiny_config())
        assert model.head.out_b.size == 5

    def test_hand_summed_tiny_ledger(self):
        # embed 11*4+4 = 48; positional 4*4 = 16
        # block: qkv 3*(4*4+4) = 60, w_o 4*4+4 = 20, ffn 4*8+8+8*4+4 = 76,
        #        layer norms 4*(4) = 16  -> 172
        # head: 4*8+8 = 40, out 8*5+5 = 45 -> 85
        cfg = ModelConfig(input_len=44, patch_len=11, d_model=4, d_head=4, heads=1,
                          encoder_layers=1, d_ff=8, mlp_units=(8,), n_classes=5)
        model = build_model(cfg)
        assert count_params(model) == 48 + 16 + 172 + 85 == 321

    def test_dense_layer_count_formula(self):
        cfg = ModelConfig(d_model=187, mlp_units=(128, 64))
        model = build_model(cfg)
        w, b = model.head.hidden[0]
        assert w.size + b.size == 187 * 128 + 128 == 24064

    def test_default_config_logs_reference_delta(self, caplog):
        with caplog.at_level(logging.INFO, logger="beatformer.model"):
            model = build_model(ModelConfig())
        total = count_params(model)
        assert str(REFERENCE_PARAM_COUNT) in caplog.text.replace(",", "")
        report = format_param_report(model)
        assert f"{total:,}" in report
        assert f"{total - REFERENCE_PARAM_COUNT:+,}" in report

    def test_breakdown_sums_to_total(self):
        model = build_model(ModelConfig())
        rows = parameter_breakdown(model)
        assert sum(count for _, count in rows) == count_params(model)
        assert len([r for r in rows if r[0].startswith("encoder block")]) == 4


class TestForward:
    def test_single_sample_shape(self):
        model = build_model(tiny_config(seed=3))
        out = forward(model, np.zeros((1, 187)))
        assert out.shape == (1, 5)

    def test_duplicated_sample_duplicates_logits(self):
        model = build_model(tiny_config(seed=4))
        rng = np.random.default_rng(0)
        row = rng.normal(size=187)
        batch = np.stack([row, rng.normal(size=187), row])
        logits = forward(model, batch, mode="eval").data
        np.testing.assert_array_equal(logits[0], logits[2])

    def test_batch_permutation_equivariance(self):
        model = build_model(tiny_config(seed=5))
        rng = np.random.default_rng(1)
        batch = rng.normal(size=(6, 187))
        perm = rng.permutation(6)
        base = forward(model, batch, mode="eval").data
        permuted = forward(model, batch[perm], mode="eval").data
        np.testing.assert_array_equal(permuted, base[perm])

    def test_eval_forward_pure(self):
        model = build_model(tiny_config(seed=6))
        batch = np.random.default_rng(2).normal(size=(3, 187))
        a = forward(model, batch, mode="eval").data
        b = forward(model, batch, mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_train_mode_reproducible_with_seeded_rng(self):
        model = build_model(tiny_config(seed=7))
        batch = np.random.default_rng(3).normal(size=(3, 187))
        a = forward(model, batch, mode="train", rng=np.random.default_rng(11)).data
        b = forward(model, batch, mode="train", rng=np.random.default_rng(11)).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_width_rejected(self):
        model = build_model(tiny_config(seed=8))
        with pytest.raises(ShapeError, match="187"):
            forward(model, np.zeros((2, 100)))

    def test_softmax_of_logits_is_distribution(self):
        model = build_model(tiny_config(seed=9))
        batch = np.random.default_rng(4).normal(size=(8, 187))
        logits = forward(model, batch).data
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert probs.shape[1] == 5
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_batched_path_matches_per_sample_reference(self):
        model = build_model(tiny_config(seed=10))
        batch = np.random.default_rng(5).normal(size=(4, 187))
        batched = forward(model, batch, mode="eval").data
        reference = np.stack(
            [forward_sample(model, batch[i], mode="eval").data for i in range(4)]
        )
        np.testing.assert_allclose(batched, reference, atol=1e-12)

    def test_rank1_input_promoted(self):
        model = build_model(tiny_config(seed=11))
        out = forward(model, np.zeros(187))
        assert out.shape == (1, 5)

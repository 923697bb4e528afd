import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langadapt import numerics as nx
from langadapt.adapters import LoraConfig, attach_lora
from langadapt.errors import ConfigError, DataError, LengthError, NumericError
from langadapt.model import forward, init_model
from langadapt.numerics import RngState, Tensor
from langadapt.templating import RawDoc, SftRecord
from langadapt.training import (
    ADAPT_DEFAULTS,
    DPO_DEFAULTS,
    SFT_DEFAULTS,
    OptimizerState,
    PreferenceLogps,
    PreferenceRecord,
    TrainConfig,
    adamw_step,
    dpo_loss,
    encode_preference,
    encode_sft,
    example_loss,
    filter_preferences,
    margins,
    perplexity,
    preference_logps,
    run_adaptation,
    run_dpo,
    run_sft,
    sft_loss,
)

RECORD = SftRecord("Be brief.", "Give the Italian word.", "dog", "cane")
PAIRS = [
    PreferenceRecord("Say the word for cat.", "gatto", "cane", "toy"),
    PreferenceRecord("Say the word for dog.", "cane", "gatto", "toy"),
    PreferenceRecord("What is 2 plus 3?", "5", "7", "toy"),
    PreferenceRecord("Opposite of hot?", "cold", "warm", "toy"),
]


def scalar_adamw(p, g, lr, b1=0.9, b2=0.999, eps=1e-8, steps=1):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def sigmoid_loss_oracle(beta, delta):
    mp.mp.dps = 40
    return float(-mp.log(1 / (1 + mp.exp(-mp.mpf(beta) * mp.mpf(delta)))))


def adapted(tiny_model, seed=1):
    return attach_lora(tiny_model, LoraConfig(rank=4), True, RngState(seed), block_size=16)


class TestConfig:
    def test_stage_defaults(self):
        assert (SFT_DEFAULTS.learning_rate, ADAPT_DEFAULTS.learning_rate, DPO_DEFAULTS.learning_rate) == (2e-4, 2e-4, 5e-5)
        assert (ADAPT_DEFAULTS.epochs, DPO_DEFAULTS.epochs, DPO_DEFAULTS.batch_size) == (3, 1, 4)
        assert ADAPT_DEFAULTS.loss_mask_mode == "full_sequence"
        assert SFT_DEFAULTS.loss_mask_mode == "response_only"

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"loss_mask_mode": "all"}, {"max_steps": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 1e-3})


class TestAdamW:
    def test_zero_grad_fixed_point(self):
        p = {"w": Tensor(np.arange(6.0).reshape(2, 3))}
        before = p["w"].data.copy()
        adamw_step(p, {"w": np.zeros((2, 3))}, OptimizerState(), TrainConfig(learning_rate=0.1))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_zero_grad_decay(self):
        p = {"w": Tensor(np.array([1.0, -2.0, 4.0]))}
        adamw_step(p, {"w": np.zeros(3)}, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.5))
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0, 4.0]) * (1 - 0.1 * 0.5), rtol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=1, max_size=5), st.integers(1, 4))
    def test_matches_scalar_oracle(self, grads, steps):
        g = np.array(grads, dtype=np.float64)
        p = {"w": Tensor(np.ones_like(g, dtype=np.float32))}
        state = OptimizerState()
        cfg = TrainConfig(learning_rate=1e-2, grad_clip_norm=None)
        for _ in range(steps):
            adamw_step(p, {"w": g.astype(np.float32)}, state, cfg)
        expected = [scalar_adamw(1.0, float(np.float32(x)), 1e-2, steps=steps) for x in g]
        np.testing.assert_allclose(p["w"].data, expected, atol=1e-6)

    def test_clipping_scales_gradient(self):
        p = {"w": Tensor(np.zeros(2))}
        state = OptimizerState()
        norm = adamw_step(p, {"w": np.array([3.0, 4.0])}, state, TrainConfig(learning_rate=0.1))
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(state.m["w"], 0.1 * np.array([0.6, 0.8]), rtol=1e-6)

    def test_non_finite_names_parameter(self):
        with pytest.raises(NumericError, match="bias"):
            adamw_step({"bias": Tensor(np.zeros(2))}, {"bias": np.array([1.0, np.inf])}, OptimizerState(), TrainConfig())


class TestSftLoss:
    def test_uniform_logits_give_log_vocab(self, tiny_model, small_vocab):
        tiny_model.params["lm_head"].data[...] = 0.0
        for mode in ("response_only", "full_sequence"):
            assert float(sft_loss(tiny_model, small_vocab, RECORD, mode).data) == pytest.approx(math.log(len(small_vocab)), rel=1e-6)

    def test_response_mask_boundary(self, small_vocab):
        ex = encode_sft(small_vocab, RECORD, "response_only", 256)
        text = small_vocab.decode([t for t, m in zip(ex.ids[1:], ex.mask) if m])
        assert text == "cane<|eot_id|>"
        full = encode_sft(small_vocab, RECORD, "full_sequence", 256)
        assert all(full.mask) and full.ids == ex.ids

    def test_mask_enumeration_oracle(self, tiny_model, small_vocab):
        ex = encode_sft(small_vocab, RECORD, "response_only", 64)
        logp = nx.log_softmax_rows(forward(tiny_model, list(ex.ids[:-1]))).data.astype(np.float64)
        picked = [-logp[t, ex.ids[t + 1]] for t in range(len(ex.mask)) if ex.mask[t]]
        assert float(example_loss(tiny_model, ex).data) == pytest.approx(np.mean(picked), rel=1e-5)

    def test_masked_targets_do_not_matter(self, tiny_model, small_vocab):
        ex = encode_sft(small_vocab, RECORD, "response_only", 64)
        logits = forward(tiny_model, list(ex.ids[:-1]))
        targets = list(ex.ids[1:])
        scrambled = [t if m else (t + 7) % len(small_vocab) for t, m in zip(targets, ex.mask)]
        a = nx.cross_entropy_next_token(logits, targets, ex.mask).data
        b = nx.cross_entropy_next_token(logits, scrambled, ex.mask).data
        assert a == b

    def test_left_truncation_keeps_response(self, small_vocab):
        long = SftRecord("", "word " * 200, "", "cane")
        ex = encode_sft(small_vocab, long, "response_only", 40)
        assert len(ex.ids) == 40
        assert ex.ids[0] == small_vocab.id_of("<|begin_of_text|>")
        assert small_vocab.decode(ex.ids[-len(small_vocab.encode("cane")) - 1 :]) == "cane<|eot_id|>"

    def test_response_too_long(self, small_vocab):
        with pytest.raises(LengthError):
            encode_sft(small_vocab, SftRecord("", "x", "", "parola " * 100), "response_only", 32)


class TestRunSft:
    def test_empty(self, tiny_model, small_vocab):
        with pytest.raises(DataError):
            run_sft(tiny_model, small_vocab, [])

    def test_freezes_base_and_is_deterministic(self, tiny_model, small_vocab):
        cfg = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=2, max_seq_len=64)
        data = [RECORD, SftRecord("", "Say hi.", "", "ciao"), SftRecord("", "Count.", "", "uno due")]
        runs = []
        for _ in range(2):
            m = adapted(tiny_model)
            frozen = {k: v.tobytes() for k, v in m.frozen_state().items()}
            result = run_sft(m, small_vocab, data, cfg, RngState(5))
            assert {k: v.tobytes() for k, v in m.frozen_state().items()} == frozen
            runs.append([e["loss"] for e in result.log])
        assert runs[0] == runs[1]
        assert len(runs[0]) == 4

    def test_max_steps(self, tiny_model, small_vocab):
        cfg = TrainConfig(batch_size=1, epochs=5, max_steps=3, max_seq_len=64)
        assert run_sft(adapted(tiny_model), small_vocab, [RECORD] * 4, cfg).steps == 3


class TestDpoLoss:
    def test_zero_margin(self):
        loss, margin = dpo_loss(PreferenceLogps(-3.0, -5.0, -3.0, -5.0), 0.1)
        assert margin == 0.0
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    @given(st.floats(-50, 0), st.floats(-50, 0), st.floats(-50, 0), st.floats(-50, 0))
    def test_zero_beta(self, a, b, c, d):
        assert dpo_loss(PreferenceLogps(a, b, c, d), 0.0)[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_scalar_oracle(self):
        loss, margin = dpo_loss(PreferenceLogps(-1.0, -3.0, -1.0, -1.0), 0.1)
        assert margin == 2.0
        assert loss == pytest.approx(sigmoid_loss_oracle(0.1, 2.0), abs=1e-12)
        assert loss == pytest.approx(0.598139, abs=1e-5)

    @given(st.floats(-30, 30), st.floats(0.01, 0.05))
    def test_strictly_decreasing(self, delta, step):
        lower = dpo_loss(PreferenceLogps(delta, 0.0, 0.0, 0.0), 0.1)[0]
        higher = dpo_loss(PreferenceLogps(delta + step, 0.0, 0.0, 0.0), 0.1)[0]
        assert higher < lower

    @pytest.mark.parametrize("beta", [0.05, 0.1, 1.0])
    def test_gradient_signs(self, beta):
        base = [-4.0, -6.0, -5.0, -5.5]
        h = 1e-6

        def shifted(i, d):
            v = list(base)
            v[i] += d
            return dpo_loss(PreferenceLogps(*v), beta)[0]

        d_chosen = (shifted(0, h) - shifted(0, -h)) / (2 * h)
        d_rejected = (shifted(1, h) - shifted(1, -h)) / (2 * h)
        assert d_chosen < 0 < d_rejected
        assert d_chosen == pytest.approx(-d_rejected, rel=1e-6)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            PreferenceLogps(float("nan"), 0.0, 0.0, 0.0)


class TestRunDpo:
    def test_first_batch_is_log_two(self, tiny_model, small_vocab):
        policy = adapted(tiny_model)
        reference = policy.copy()
        result = run_dpo(policy, reference, small_vocab, PAIRS, TrainConfig(learning_rate=5e-5, batch_size=4, epochs=1, max_seq_len=64))
        assert result.log[0]["loss"] == pytest.approx(math.log(2), abs=1e-5)
        assert result.log[0]["margin"] == pytest.approx(0.0, abs=1e-5)

    @pytest.mark.parametrize("seed", range(4))
    def test_single_pair_margin_increases(self, tiny_config, small_vocab, seed):
        policy = attach_lora(init_model(tiny_config, RngState(seed)), LoraConfig(rank=4), True, RngState(seed + 100), block_size=16)
        reference = policy.copy()
        cfg = TrainConfig(learning_rate=5e-5, batch_size=1, epochs=1, max_seq_len=64)
        result = run_dpo(policy, reference, small_vocab, PAIRS[seed : seed + 1], cfg)
        assert result.steps == 1
        assert result.extra["margin_after"] > result.extra["margin_before"]

    def test_reference_untouched(self, tiny_model, small_vocab):
        policy = adapted(tiny_model)
        reference = policy.copy()
        ex = encode_preference(small_vocab, PAIRS[0], 64)
        before = preference_logps(reference, reference, ex)
        run_dpo(policy, reference, small_vocab, PAIRS, TrainConfig(learning_rate=1e-2, batch_size=2, epochs=2, max_seq_len=64))
        assert preference_logps(reference, reference, ex) == before
        assert margins(policy, reference, [ex])[0] != 0.0

    def test_structure_mismatch(self, tiny_model, small_vocab):
        other = init_model(tiny_model.config.__class__(**{**tiny_model.config.to_dict(), "d_ff": 48}), RngState(0))
        with pytest.raises(ConfigError):
            run_dpo(adapted(tiny_model), other, small_vocab, PAIRS)


class TestFilterPreferences:
    def test_excluded_source(self):
        recs = [PreferenceRecord("p", "a", "b", "toxic-dpo-v0.2"), PreferenceRecord("p", "a", "b", "orca")]
        assert [r.source for r in filter_preferences(recs, excluded_sources={"toxic-dpo-v0.2"})] == ["orca"]

    def test_min_score(self):
        recs = [PreferenceRecord("p", "a", "b", "s", score) for score in (5, 9, 10)] + [PreferenceRecord("p", "a", "b", "s")]
        assert [r.score for r in filter_preferences(recs, min_score=9)] == [9, 10, None]

    def test_identity(self):
        recs = [PreferenceRecord("p", "a", "b", "s", 1.0), PreferenceRecord("q", "c", "d")]
        assert filter_preferences(recs) == recs

    def test_record_validation(self):
        with pytest.raises(DataError):
            PreferenceRecord("p", "same", "same")
        with pytest.raises(DataError):
            PreferenceRecord("  ", "a", "b")


class TestAdaptation:
    def test_empty(self, tiny_model, small_vocab):
        with pytest.raises(DataError):
            run_adaptation(tiny_model, small_vocab, [])

    def test_heldout_perplexity_decreases(self, tiny_model, small_vocab):
        corpus = [RawDoc("il gatto mangia il pesce."), RawDoc("la ragazza vede la casa."), RawDoc("il cane mangia il pane.")]
        heldout = [RawDoc("il gatto vede la casa.")]
        cfg = TrainConfig(learning_rate=2e-4, batch_size=1, epochs=3, loss_mask_mode="full_sequence", max_seq_len=64)
        result = run_adaptation(adapted(tiny_model), small_vocab, corpus, cfg, heldout, [RawDoc("the dog eats.")])
        assert result.extra["perplexity_after"] < result.extra["perplexity_before"]
        assert "source_perplexity_after" in result.extra

    def test_repeated_document_approaches_one(self, tiny_model, small_vocab):
        doc = RawDoc("il gatto mangia il pesce.")
        model = tiny_model.set_trainable(True)
        cfg = TrainConfig(learning_rate=2e-2, batch_size=1, epochs=60, loss_mask_mode="full_sequence", max_seq_len=64)
        before = perplexity(model, small_vocab, [doc])
        run_adaptation(model, small_vocab, [doc], cfg)
        after = perplexity(model, small_vocab, [doc])
        assert after < 1.1 < before

    def test_perplexity_of_uniform_model(self, tiny_model, small_vocab):
        tiny_model.params["lm_head"].data[...] = 0.0
        assert perplexity(tiny_model, small_vocab, [RawDoc("ciao")]) == pytest.approx(len(small_vocab), rel=1e-5)

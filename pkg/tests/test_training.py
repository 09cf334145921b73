"""Training-loop tests: update semantics, determinism, resume equivalence,
divergence detection, and perplexity evaluation."""

import math
import os

import numpy as np
import pytest

from hmoe.checkpoint import load_checkpoint, save_checkpoint
from hmoe.data import (
    batch_rng,
    detokenize,
    load_corpus,
    sample_batch,
    synth_corpus,
    tokenize_bytes,
    write_synth_corpus,
)
from hmoe.errors import CheckpointFormatError, ContractError, TrainingDivergedError
from hmoe.model import ModelConfig, build_model
from hmoe.tensor import no_grad, token_nll
from hmoe.training import AdamW, TrainConfig, evaluate_perplexity, lr_at, train_loop, train_step


def small_cfg(**overrides) -> ModelConfig:
    base = dict(
        n_layers=1,
        h_input=32,
        n_heads=2,
        head_dim=16,
        n_experts=4,
        budget_per_layer=128,
        routing_mode="top_p",
        p=0.6,
        strategy="arithmetic",
        context_length=64,
        seed=11,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_tc(**overrides) -> TrainConfig:
    base = dict(batch_size=4, peak_lr=2e-3, warmup_steps=20, log_interval=10)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus_ids():
    return tokenize_bytes(synth_corpus(100_000, seed=4))


class TestTokenization:
    def test_single_byte(self):
        assert tokenize_bytes(b"A").tolist() == [65]

    def test_empty(self):
        assert tokenize_bytes(b"").size == 0

    def test_round_trip_random_bytes(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            raw = bytes(rng.integers(0, 256, size=200, dtype=np.uint8))
            assert detokenize(tokenize_bytes(raw)) == raw

    def test_load_corpus_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="no_such_corpus"):
            load_corpus(str(tmp_path / "no_such_corpus.txt"))

    def test_empty_corpus_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_bytes(b"")
        with pytest.raises(ContractError):
            load_corpus(str(path))


class TestLrSchedule:
    def test_linear_warmup_then_constant(self):
        tc = small_tc(warmup_steps=10, peak_lr=1e-3)
        assert lr_at(5, 100, tc) == pytest.approx(5e-4)
        assert lr_at(10, 100, tc) == pytest.approx(1e-3)
        assert lr_at(80, 100, tc) == pytest.approx(1e-3)

    def test_cosine_decays_to_zero(self):
        tc = small_tc(warmup_steps=10, peak_lr=1e-3, schedule="cosine")
        assert lr_at(100, 100, tc) == pytest.approx(0.0, abs=1e-12)
        assert lr_at(55, 100, tc) == pytest.approx(5e-4, rel=1e-9)


class TestTrainStep:
    def test_zero_lr_leaves_parameters_unchanged(self, corpus_ids):
        cfg = small_cfg()
        model = build_model(cfg)
        opt = AdamW(model.parameters(), small_tc())
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        inp, tgt = sample_batch(corpus_ids, 4, 64, batch_rng(cfg.seed, 1))
        report1, _ = train_step(model, inp, tgt, opt, 0.0, 1, 0.0)
        for k, v in model.parameters().items():
            assert np.array_equal(before[k], v.data)
        report2, _ = train_step(model, inp, tgt, opt, 0.0, 2, 0.0)
        assert report1.lm_loss == report2.lm_loss

    def test_uniform_warm_start_bound(self):
        cfg = small_cfg()
        model = build_model(cfg)
        model.lm_head.data[:] = 0.0
        ids = tokenize_bytes(b"abababab" * 64)
        opt = AdamW(model.parameters(), small_tc())
        inp, tgt = sample_batch(ids, 2, 64, batch_rng(0, 1))
        report, _ = train_step(model, inp, tgt, opt, 1e-3, 1, 0.0)
        assert report.lm_loss == pytest.approx(math.log(cfg.vocab_size), abs=1e-9)
        report2, _ = train_step(model, inp, tgt, opt, 1e-3, 2, 0.0)
        assert report2.lm_loss < math.log(cfg.vocab_size)

    def test_loss_improves_median_over_seeds(self, corpus_ids):
        improvements = []
        for seed in (1, 2, 3):
            cfg = small_cfg(seed=seed)
            result = train_loop(cfg, corpus_ids, 200, small_tc())
            first = result.loss_curve[0]["lm_loss"]
            last = result.loss_curve[-1]["lm_loss"]
            improvements.append(last < first)
        assert sorted(improvements)[1]  # median of three booleans

    def test_divergence_raises_with_step(self, corpus_ids):
        cfg = small_cfg()
        model = build_model(cfg)
        opt = AdamW(model.parameters(), small_tc())
        with pytest.raises(TrainingDivergedError) as err:
            cum = 0.0
            for step in range(1, 100):
                inp, tgt = sample_batch(corpus_ids, 4, 64, batch_rng(cfg.seed, step))
                _, cum = train_step(model, inp, tgt, opt, 1e3, step, cum)
        assert err.value.step >= 1
        assert str(err.value.step) in str(err.value)


class TestTrainLoop:
    def test_zero_steps_initial_checkpoint(self, corpus_ids):
        result = train_loop(small_cfg(), corpus_ids, 0, small_tc())
        assert result.steps_run == 0
        assert result.records == [] and result.loss_curve == []
        ckpt = result.checkpoint()
        assert ckpt.step == 0

    def test_deterministic_given_seed(self, corpus_ids):
        a = train_loop(small_cfg(), corpus_ids, 30, small_tc())
        b = train_loop(small_cfg(), corpus_ids, 30, small_tc())
        assert a.loss_curve[-1]["lm_loss"] == b.loss_curve[-1]["lm_loss"]
        assert a.cum_flops == b.cum_flops

    def test_resume_matches_uninterrupted(self, corpus_ids, tmp_path):
        cfg = small_cfg()
        tc = small_tc()
        straight = train_loop(cfg, corpus_ids, 40, tc)

        first_half = train_loop(cfg, corpus_ids, 20, tc)
        path = str(tmp_path / "mid.hmoe")
        save_checkpoint(path, first_half.checkpoint())
        resumed = train_loop(cfg, corpus_ids, 40, tc, resume=load_checkpoint(path))

        assert abs(resumed.loss_curve[-1]["lm_loss"] - straight.loss_curve[-1]["lm_loss"]) < 1e-9
        assert abs(resumed.cum_flops - straight.cum_flops) < 1e-3
        for k, v in straight.model.parameters().items():
            assert np.allclose(resumed.model.parameters()[k].data, v.data, atol=1e-12)

    def test_flops_budget_stops_early(self, corpus_ids):
        cfg = small_cfg()
        full = train_loop(cfg, corpus_ids, 30, small_tc())
        budget = full.cum_flops / 2
        capped = train_loop(cfg, corpus_ids, 30, small_tc(), flops_budget=budget)
        assert capped.steps_run < 30
        assert capped.cum_flops >= budget

    def test_sink_receives_log_interval_records(self, corpus_ids):
        seen = []

        class Sink:
            def add(self, record):
                seen.append(record.step)

        train_loop(small_cfg(), corpus_ids, 25, small_tc(log_interval=10), sink=Sink())
        assert seen == [10, 20, 25]


class TestCheckpointFile:
    def test_round_trip_bit_identical_forward(self, corpus_ids, tmp_path):
        cfg = small_cfg()
        result = train_loop(cfg, corpus_ids, 10, small_tc())
        path = str(tmp_path / "ck.hmoe")
        save_checkpoint(path, result.checkpoint())
        reloaded = load_checkpoint(path).rebuild_model()
        ids = sample_batch(corpus_ids, 2, 64, batch_rng(0, 99))[0]
        with no_grad():
            a, _ = result.model.forward(ids)
            b, _ = reloaded.forward(ids)
        assert np.array_equal(a.data, b.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.hmoe"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(str(path))

    def test_version_mismatch_rejected(self, corpus_ids, tmp_path):
        result = train_loop(small_cfg(), corpus_ids, 1, small_tc())
        path = str(tmp_path / "v9.hmoe")
        save_checkpoint(path, result.checkpoint())
        raw = bytearray(open(path, "rb").read())
        raw[4] = 9
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)


class TestPerplexity:
    def test_untrained_is_near_vocab_size(self):
        cfg = small_cfg()
        model = build_model(cfg)
        model.lm_head.data[:] = 0.0
        rng = np.random.default_rng(9)
        ids = rng.integers(0, 256, size=5000)
        assert evaluate_perplexity(model, ids) == pytest.approx(256.0, rel=1e-6)

    def test_matches_direct_accumulation(self, corpus_ids):
        cfg = small_cfg()
        model = build_model(cfg)
        ids = corpus_ids[:2000]
        got = evaluate_perplexity(model, ids)

        total, count = 0.0, 0
        with no_grad():
            for start in range(0, len(ids) - 1, cfg.context_length):
                chunk = ids[start : start + cfg.context_length + 1]
                if len(chunk) < 2:
                    continue
                logits, _ = model.forward(chunk[:-1][None, :])
                total += float(token_nll(logits.data, chunk[1:]).sum())
                count += len(chunk) - 1
        assert got == pytest.approx(float(np.exp(total / count)), rel=1e-12)

    def test_deterministic(self, corpus_ids):
        model = build_model(small_cfg())
        ids = corpus_ids[:3000]
        assert evaluate_perplexity(model, ids) == evaluate_perplexity(model, ids)

    def test_empty_rejected(self):
        model = build_model(small_cfg())
        with pytest.raises(ContractError):
            evaluate_perplexity(model, np.zeros(0, dtype=np.int64))


def test_write_synth_corpus(tmp_path):
    path = str(tmp_path / "corpus.txt")
    write_synth_corpus(path, 5000, seed=1)
    assert os.path.getsize(path) == 5000
    again = str(tmp_path / "corpus2.txt")
    write_synth_corpus(again, 5000, seed=1)
    assert open(path, "rb").read() == open(again, "rb").read()

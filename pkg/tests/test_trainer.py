"""Trainer tests: the duality regularizer's arithmetic, AdaDelta against
an independent recurrence, step mechanics, and checkpoint integrity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualqa import autodiff as ad
from dualqa import bigram, text, trainer

from helpers import (
    TINY_DIMS, make_small_trainer, make_tiny_models, small_corpus, unique_tensors,
)


class TestTrainerConfig:
    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            trainer.TrainerConfig(lambda_q=-0.1)

    def test_defaults_match_documented_values(self):
        cfg = trainer.TrainerConfig()
        assert cfg.batch_size == 64
        assert cfg.pool_batches == 10
        assert cfg.learning_rate == 2.0
        assert cfg.adadelta_rho == 0.95
        assert cfg.adadelta_eps == 1e-6


def reference_adadelta(grads, rho, eps, lr):
    """Independent scalar implementation of the update recurrences."""
    eg2, ed2, x = 0.0, 0.0, 0.0
    trajectory = []
    for g in grads:
        eg2 = rho * eg2 + (1 - rho) * g * g
        delta = -math.sqrt(ed2 + eps) / math.sqrt(eg2 + eps) * g
        ed2 = rho * ed2 + (1 - rho) * delta * delta
        x += lr * delta
        trajectory.append(x)
    return trajectory


class TestAdaDelta:
    CFG = trainer.TrainerConfig(learning_rate=2.0, adadelta_rho=0.95, adadelta_eps=1e-6)

    def test_first_step_anchor(self):
        param = ad.Tensor([0.0])
        state = trainer.AdaDeltaState.zeros_like(param)
        trainer.adadelta_update(param, np.array([1.0]), state, self.CFG)
        assert param.values[0] == pytest.approx(-0.008944, abs=1e-6)
        expected = reference_adadelta([1.0], 0.95, 1e-6, 2.0)[0]
        assert param.values[0] == pytest.approx(expected, abs=1e-15)

    def test_matches_reference_over_many_steps(self):
        rng = np.random.default_rng(5)
        grads = list(rng.normal(size=20))
        param = ad.Tensor([0.0])
        state = trainer.AdaDeltaState.zeros_like(param)
        for g in grads:
            trainer.adadelta_update(param, np.array([g]), state, self.CFG)
        expected = reference_adadelta(grads, 0.95, 1e-6, 2.0)[-1]
        assert param.values[0] == pytest.approx(expected, rel=1e-12)

    def test_zero_gradient_leaves_param_and_decays_accumulators(self):
        param = ad.Tensor([1.5])
        state = trainer.AdaDeltaState.zeros_like(param)
        trainer.adadelta_update(param, np.array([1.0]), state, self.CFG)
        value = param.values.copy()
        eg2 = state.avg_sq_grad.copy()
        trainer.adadelta_update(param, np.array([0.0]), state, self.CFG)
        np.testing.assert_array_equal(param.values, value)
        assert state.avg_sq_grad[0] == pytest.approx(0.95 * eg2[0])

    def test_update_opposes_gradient_sign(self):
        rng = np.random.default_rng(6)
        grads = rng.normal(size=12)
        param = ad.Tensor(np.zeros(12))
        state = trainer.AdaDeltaState.zeros_like(param)
        trainer.adadelta_update(param, grads, state, self.CFG)
        nonzero = grads != 0
        assert np.all(np.sign(param.values[nonzero]) == -np.sign(grads[nonzero]))

    def test_shape_mismatch_rejected(self):
        param = ad.Tensor([0.0, 0.0])
        state = trainer.AdaDeltaState.zeros_like(param)
        with pytest.raises(ValueError, match="shape"):
            trainer.adadelta_update(param, np.zeros(3), state, self.CFG)

    def test_accumulators_stay_nonnegative(self):
        rng = np.random.default_rng(7)
        param = ad.Tensor(np.zeros(4))
        state = trainer.AdaDeltaState.zeros_like(param)
        for _ in range(30):
            trainer.adadelta_update(param, rng.normal(size=4), state, self.CFG)
        assert np.all(state.avg_sq_grad >= 0) and np.all(state.avg_sq_update >= 0)


class TestSquaredLogGap:
    def test_balanced_case_is_exactly_zero(self):
        assert trainer.squared_log_gap(-10.0, -20.0, -12.0, -18.0).item() == 0.0

    def test_one_nat_gap_is_exactly_one(self):
        assert trainer.squared_log_gap(-10.0, -20.0, -12.0, -17.0).item() == 1.0

    @settings(deadline=None, max_examples=50)
    @given(st.tuples(*[st.floats(-60.0, 0.0) for _ in range(4)]))
    def test_nonnegative(self, logs):
        assert trainer.squared_log_gap(*logs).item() >= 0.0

    def test_invariant_to_factorization_side_order(self):
        # The square makes the gap's sign irrelevant.
        forward = trainer.squared_log_gap(-3.0, -7.0, -4.0, -2.0).item()
        swapped = trainer.squared_log_gap(-4.0, -2.0, -3.0, -7.0).item()
        assert forward == pytest.approx(swapped, abs=1e-12)

    def test_accepts_tensor_terms(self):
        t = ad.Tensor(np.asarray(-20.0))
        assert trainer.squared_log_gap(-10.0, t, -12.0, -18.0).item() == 0.0


class TestDualLoss:
    def test_nonnegative_and_finite(self):
        qa_params, qg_params = make_tiny_models(seed=4)
        lm = bigram.BigramLM.fit([["a", "b"], ["b", "c"]])
        value = trainer.dual_loss(
            ["a", "b"], ["b", "c"], [4, 7], [5, 8], qa_params, qg_params,
            lm, lm, [[6, 9], [10]],
        ).item()
        assert value >= 0.0 and np.isfinite(value)

    def test_gradient_reaches_both_models(self):
        qa_params, qg_params = make_tiny_models(seed=4)
        lm = bigram.BigramLM.fit([["a", "b"], ["b", "c"]])
        with ad.ComputationRecord():
            loss = trainer.dual_loss(
                ["a", "b"], ["b", "c"], [4, 7], [5, 8], qa_params, qg_params,
                lm, lm, [[6, 9], [10]],
            )
        ad.backward(loss)
        assert np.any(qa_params.output_weights.grad != 0.0)
        assert np.any(qg_params.output_projection.grad != 0.0)


class TestTrainStep:
    def _batches(self, pairs, n, batch_size=4, seed=7):
        batches = list(text.make_batches(pairs, batch_size, 2, seed=seed))
        return [batches[i % len(batches)] for i in range(n)]

    def test_losses_finite_and_nonnegative(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        qa_loss, qg_loss, dual_loss = dual.train_step(self._batches(pairs, 1)[0])
        assert qa_loss >= 0.0 and qg_loss >= 0.0 and dual_loss >= 0.0
        assert all(np.isfinite(v) for v in (qa_loss, qg_loss, dual_loss))

    def test_lambda_zero_matches_independent_training(self, tmp_path):
        pairs = small_corpus(tmp_path)
        joint = make_small_trainer(pairs, lambda_q=0.0, lambda_a=0.0)
        solo = make_small_trainer(pairs, lambda_q=0.0, lambda_a=0.0)
        for batch in self._batches(pairs, 8):
            joint.train_step(batch)
            solo.independent_step(batch)
        for (name_a, ta), (name_b, tb) in zip(joint.parameters, solo.parameters):
            assert name_a == name_b
            np.testing.assert_array_equal(ta.values, tb.values)

    def test_lambda_positive_diverges_from_independent(self, tmp_path):
        pairs = small_corpus(tmp_path)
        joint = make_small_trainer(pairs, lambda_q=0.1, lambda_a=0.1)
        solo = make_small_trainer(pairs, lambda_q=0.1, lambda_a=0.1)
        batch = self._batches(pairs, 1)[0]
        joint.train_step(batch)
        solo.independent_step(batch)
        differs = any(
            not np.array_equal(ta.values, tb.values)
            for (_, ta), (_, tb) in zip(joint.parameters, solo.parameters)
        )
        assert differs

    def test_identical_seeds_identical_parameters(self, tmp_path):
        pairs = small_corpus(tmp_path)
        runs = []
        for _ in range(2):
            dual = make_small_trainer(pairs, seed=11)
            for batch in self._batches(pairs, 6):
                dual.train_step(batch)
            runs.append([t.values.copy() for _, t in dual.parameters])
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_step_counter_advances(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        batch = self._batches(pairs, 1)[0]
        dual.train_step(batch)
        dual.train_step(batch)
        assert dual.global_step == 2

    def test_nonfinite_loss_raises_with_step_index(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        dual.global_step = 41
        with pytest.raises(trainer.NumericalError, match="step 41"):
            dual._check_finite(qa_loss=float("nan"))

    def test_empty_batch_rejected(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        with pytest.raises(ValueError):
            dual.train_step(text.TrainingBatch([], []))


class TestNamedParameters:
    def test_shared_embeddings_listed_once(self):
        qa_params, qg_params = make_tiny_models(seed=1)
        names = [n for n, _ in trainer.named_parameters(qa_params, qg_params)]
        assert names.count("shared.question_embeddings") == 1
        assert names.count("shared.answer_embeddings") == 1
        assert len(names) == len(set(names))

    def test_unshared_models_rejected(self):
        qa_params, _ = make_tiny_models(seed=1)
        _, qg_params = make_tiny_models(seed=2)
        with pytest.raises(ValueError, match="share"):
            trainer.named_parameters(qa_params, qg_params)

    def test_tensor_set_is_deduplicated(self):
        qa_params, qg_params = make_tiny_models(seed=1)
        named = trainer.named_parameters(qa_params, qg_params)
        assert len(unique_tensors(named)) == len(named)


def _checkpoint_config():
    return {
        "embedding_dim": TINY_DIMS.embedding_dim, "qa_hidden": TINY_DIMS.qa_hidden,
        "qg_hidden": TINY_DIMS.qg_hidden, "attention_dim": TINY_DIMS.attention_dim,
        "cooc_vocab": TINY_DIMS.cooc_vocab, "cooc_dim": TINY_DIMS.cooc_dim,
        "vocab_size": 100,
    }


class TestCheckpoint:
    def _build(self, tmp_path, seed=9):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs, seed=seed)
        path = tmp_path / "model.ckpt"
        trainer.save_checkpoint(
            path, dual.qa_params, dual.qg_params, dual.lm_q, dual.lm_a,
            dual.vocab_q, dual.vocab_a, _checkpoint_config(),
        )
        return dual, path

    def test_roundtrip_bit_identical(self, tmp_path):
        dual, path = self._build(tmp_path)
        loaded = trainer.load_checkpoint(path)
        restored = trainer.named_parameters(loaded.qa_params, loaded.qg_params)
        for (name_a, ta), (name_b, tb) in zip(dual.parameters, restored):
            assert name_a == name_b
            np.testing.assert_array_equal(ta.values, tb.values)
        assert loaded.vocab_q.id_to_token == dual.vocab_q.id_to_token
        assert loaded.lm_a.bigram_counts == dual.lm_a.bigram_counts
        assert loaded.config == _checkpoint_config()

    def test_resave_identical_bytes(self, tmp_path):
        _, path = self._build(tmp_path)
        loaded = trainer.load_checkpoint(path)
        path2 = tmp_path / "model2.ckpt"
        trainer.save_checkpoint(
            path2, loaded.qa_params, loaded.qg_params, loaded.lm_q, loaded.lm_a,
            loaded.vocab_q, loaded.vocab_a, loaded.config,
        )
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        _, path = self._build(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(trainer.CheckpointError, match="truncated"):
            trainer.load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        _, path = self._build(tmp_path)
        data = path.read_bytes()
        path.write_bytes(b"NOTDUAL" + data[7:])
        with pytest.raises(trainer.CheckpointError, match="version mismatch"):
            trainer.load_checkpoint(path)

    def test_dimension_mismatch_rejected(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        path = tmp_path / "model.ckpt"
        config = _checkpoint_config()
        config["qa_hidden"] = TINY_DIMS.qa_hidden * 2  # lies about the shapes
        trainer.save_checkpoint(
            path, dual.qa_params, dual.qg_params, dual.lm_q, dual.lm_a,
            dual.vocab_q, dual.vocab_a, config,
        )
        with pytest.raises(trainer.CheckpointError, match="shape mismatch"):
            trainer.load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(trainer.CheckpointError, match="not found"):
            trainer.load_checkpoint(tmp_path / "missing.ckpt")

    def test_missing_dims_in_config_rejected(self, tmp_path):
        pairs = small_corpus(tmp_path)
        dual = make_small_trainer(pairs)
        path = tmp_path / "model.ckpt"
        config = _checkpoint_config()
        del config["qg_hidden"]
        trainer.save_checkpoint(
            path, dual.qa_params, dual.qg_params, dual.lm_q, dual.lm_a,
            dual.vocab_q, dual.vocab_a, config,
        )
        with pytest.raises(trainer.CheckpointError, match="qg_hidden"):
            trainer.load_checkpoint(path)

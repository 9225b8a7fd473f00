import os
import sys
import json
import math
import pytest
import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import cli
import config
import trainer
from classifier_model import ModelConfig, init_model, load_checkpoint
from corpus import Dataset
from errors import ConfigurationError, NumericAnomalyError, TrainingAbortedError
from numeric_core import Tensor, make_rng
from objectives import ObjectiveConfig
from trainer import (
    OptimizerState, TrainConfig, UnlabeledCycler, adam_step, clip_gradients, error_rate, global_norm,
    lr_schedule, plan_batch_indices, train,
)
from vocab_embed import build_vocabulary, random_embeddings


def greedy_reference(lengths, budget):
    """Plain re-statement of sequential greedy packing"""
    batches = [[]]
    used = 0
    for index, length in enumerate(lengths):
        if batches[-1] and used + length > budget:
            batches.append([])
            used = 0
        batches[-1].append(index)
        used += length
    return batches if batches[-1] else []


def read_lines(path):
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read().splitlines()


def make_params(dataset, finetune=True, seed=7):
    vocab = build_vocabulary(list(dataset.labeled) + list(dataset.unlabeled), 50)
    embedding = random_embeddings(vocab, 4, make_rng(seed, "embedding"), finetune=finetune)
    params = init_model(ModelConfig(4, 6, dataset.num_classes), embedding, make_rng(seed, "init"))
    return vocab, params


def tiny_config(**overrides):
    objective = overrides.pop("objective", ObjectiveConfig(1.0, 1.0, 1.0, 1.0, epsilon=0.5, use_unlabeled=True))
    settings = dict(token_budget=8, learning_rate=0.01, max_epochs=2, p_drop=0.1, p_w=0.1, seed=3,
                    objective=objective)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.mark.unit
class TestBatchPlanning:
    """Test suite for token-budget batching"""

    def test_documented_example(self):
        assert plan_batch_indices([10, 20, 30], 35) == [[0, 1], [2]]

    def test_matches_greedy_reference(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            lengths = rng.integers(1, 30, size=rng.integers(1, 40)).tolist()
            assert plan_batch_indices(lengths, 40) == greedy_reference(lengths, 40)

    def test_batches_respect_budget_and_cover_everything(self):
        lengths = np.random.default_rng(1).integers(1, 20, size=57).tolist()
        batches = plan_batch_indices(lengths, 25, make_rng(0, "batching"))
        assert sorted(i for batch in batches for i in batch) == list(range(57))
        for batch in batches:
            assert len(batch) == 1 or sum(lengths[i] for i in batch) <= 25

    def test_oversized_document(self):
        with pytest.raises(ConfigurationError) as info:
            plan_batch_indices([3, 50], 10)
        assert info.value.field == "token_budget"

    def test_shuffle_is_seeded(self):
        lengths = [1] * 30
        first = plan_batch_indices(lengths, 4, make_rng(5, "batching"))
        second = plan_batch_indices(lengths, 4, make_rng(5, "batching"))
        assert first == second
        assert first != plan_batch_indices(lengths, 4)

    def test_unlabeled_cycler_examples_mode(self, sample_documents):
        cycler = UnlabeledCycler(sample_documents.unlabeled, 8, make_rng(0, "unlabeled"), mode="examples")
        seen = cycler.next_batch(2) + cycler.next_batch(1)
        assert sorted(ex.tokens for ex in seen) == sorted(ex.tokens for ex in sample_documents.unlabeled)
        assert len(cycler.next_batch(2)) == 2
        assert cycler.passes == 1

    def test_unlabeled_cycler_restore(self, sample_documents):
        cycler = UnlabeledCycler(sample_documents.unlabeled, 8, make_rng(0, "unlabeled"))
        cycler.next_batch(1)
        state, order = cycler.state()
        expected = cycler.next_batch(1)
        other = UnlabeledCycler(sample_documents.unlabeled, 8, make_rng(9, "unlabeled"))
        other.restore(state, order)
        assert other.next_batch(1) == expected


@pytest.mark.unit
class TestOptimizer:
    """Test suite for Adam, clipping and the learning-rate schedule"""

    def test_first_adam_step(self):
        weight = Tensor(np.zeros(2), requires_grad=True)
        named = [("w", weight)]
        state = OptimizerState.zeros(named)
        adam_step(named, {"w": np.ones(2)}, state, 1e-3, 0.0, 0.98, 1e-8)
        np.testing.assert_allclose(weight.data, np.full(2, -1e-3 / (1.0 + 1e-8)), rtol=1e-12)
        assert state.step == 1

    def test_zero_gradient_leaves_parameters(self):
        weight = Tensor(np.array([0.5, -0.5]), requires_grad=True)
        named = [("w", weight)]
        adam_step(named, {"w": np.zeros(2)}, OptimizerState.zeros(named), 1e-3, 0.0, 0.98, 1e-8)
        np.testing.assert_array_equal(weight.data, [0.5, -0.5])

    def test_non_finite_gradient_is_rejected_untouched(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        named = [("a", a), ("b", b)]
        state = OptimizerState.zeros(named)
        with pytest.raises(NumericAnomalyError):
            adam_step(named, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 1e-3, 0.0, 0.98, 1e-8)
        np.testing.assert_array_equal(a.data, np.ones(2))
        np.testing.assert_array_equal(state.m["a"], np.zeros(2))
        assert state.step == 0

    def test_clipping_to_unit_norm(self):
        grads, norm, clipped = clip_gradients({"a": np.array([0.0, 4.0])}, 1.0)
        assert norm == 4.0
        assert clipped
        np.testing.assert_allclose(grads["a"], [0.0, 1.0])
        assert global_norm(grads) == pytest.approx(1.0)

    def test_small_gradient_not_clipped(self):
        grads, norm, clipped = clip_gradients({"a": np.array([0.3, 0.4])}, 1.0)
        assert not clipped
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])

    def test_lr_schedule(self):
        assert lr_schedule(2, 1e-3, 0.9) == pytest.approx(8.1e-4)
        assert lr_schedule(0, 1e-3, 0.9) == 1e-3
        with pytest.raises(ConfigurationError):
            lr_schedule(1, 1e-3, 0.0)

    def test_train_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(p_drop=1.0).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(unlabeled_batching="random").validate()


@pytest.mark.integration
class TestTraining:
    """Test suite for end-to-end training runs on a tiny corpus"""

    @pytest.fixture
    def dev_split(self, sample_documents):
        return Dataset(sample_documents.labeled, (), sample_documents.num_classes, split="dev")

    def test_runs_are_bit_identical(self, sample_documents, dev_split, temp_test_directory):
        paths = []
        for name in ("same-a", "same-b"):
            vocab, params = make_params(sample_documents)
            run_dir = os.path.join(temp_test_directory, name)
            train(sample_documents, params, vocab, tiny_config(), dev=dev_split, run_dir=run_dir)
            paths.append(os.path.join(run_dir, config.METRICS_FILE_NAME))
        assert read_lines(paths[0]) == read_lines(paths[1])

    def test_epoch_summaries(self, sample_documents, dev_split):
        vocab, params = make_params(sample_documents)
        train_config = tiny_config(max_epochs=3)
        result = train(sample_documents, params, vocab, train_config, dev=dev_split)
        assert len(result.epochs) == 3
        for summary in result.epochs:
            assert summary["type"] == "epoch"
            assert summary["skipped"] == 0
            assert math.isfinite(summary["train_loss"])
            assert 0.0 <= summary["dev_error"] <= 1.0
        assert result.best_dev_error == min(summary["dev_error"] for summary in result.epochs)

    def test_every_example_once_per_epoch(self, sample_documents, dev_split, temp_test_directory):
        vocab, params = make_params(sample_documents)
        run_dir = os.path.join(temp_test_directory, "coverage")
        train(sample_documents, params, vocab, tiny_config(max_epochs=3), dev=dev_split, run_dir=run_dir)
        records = [json.loads(line) for line in read_lines(os.path.join(run_dir, config.METRICS_FILE_NAME))]
        total_tokens = sum(len(ex) for ex in sample_documents.labeled)
        for epoch in range(3):
            steps = [r for r in records if r["type"] == "step" and r["epoch"] == epoch]
            assert sum(r["batch_tokens"] for r in steps) == total_tokens
            for r in steps:
                assert r["batch_tokens"] <= 8
                assert r["clipped"] == (r["grad_norm"] > 1.0)
                assert r["n_labeled"] >= 1

    def test_learning_rate_decays_per_epoch(self, sample_documents, dev_split):
        vocab, params = make_params(sample_documents)
        result = train(sample_documents, params, vocab, tiny_config(max_epochs=3, decay_rate=0.5), dev=dev_split)
        assert [summary["lr"] for summary in result.epochs] == [0.01, 0.005, 0.0025]

    def test_static_embedding_is_not_updated(self, sample_documents, dev_split):
        vocab, params = make_params(sample_documents, finetune=False)
        before = params.embedding.digest()
        head_before = params.head.weight.data.copy()
        train(sample_documents, params, vocab, tiny_config(max_epochs=1), dev=dev_split)
        assert params.embedding.digest() == before
        assert not np.array_equal(params.head.weight.data, head_before)

    def test_finetuned_embedding_is_updated(self, sample_documents, dev_split):
        vocab, params = make_params(sample_documents, finetune=True)
        before = params.embedding.digest()
        train(sample_documents, params, vocab, tiny_config(max_epochs=1), dev=dev_split)
        assert params.embedding.digest() != before

    def test_checkpoints_written(self, sample_documents, dev_split, temp_test_directory):
        vocab, params = make_params(sample_documents)
        run_dir = os.path.join(temp_test_directory, "checkpoints")
        result = train(sample_documents, params, vocab, tiny_config(max_epochs=1), dev=dev_split, run_dir=run_dir)
        best = load_checkpoint(os.path.join(run_dir, config.BEST_CHECKPOINT_NAME), vocab)
        assert error_rate(best.params, dev_split, vocab) == result.best_dev_error
        last = load_checkpoint(os.path.join(run_dir, config.LAST_CHECKPOINT_NAME), vocab)
        assert last.meta["extra"]["epochs_completed"] == 1

    def test_resume_matches_uninterrupted_run(self, sample_documents, dev_split, temp_test_directory):
        vocab, params = make_params(sample_documents)
        straight_dir = os.path.join(temp_test_directory, "straight")
        train(sample_documents, params, vocab, tiny_config(max_epochs=2), dev=dev_split, run_dir=straight_dir)

        vocab_b, params_b = make_params(sample_documents)
        resumed_dir = os.path.join(temp_test_directory, "resumed")
        train(sample_documents, params_b, vocab_b, tiny_config(max_epochs=1), dev=dev_split, run_dir=resumed_dir)
        vocab_c, params_c = make_params(sample_documents, seed=99)
        train(sample_documents, params_c, vocab_c, tiny_config(max_epochs=2), dev=dev_split,
              run_dir=resumed_dir, resume=True)

        for (name, a), (_, c) in zip(params.named_tensors(), params_c.named_tensors()):
            assert np.array_equal(a.data, c.data), f"'{name}' differs after resume"
        assert read_lines(os.path.join(straight_dir, config.METRICS_FILE_NAME)) == \
            read_lines(os.path.join(resumed_dir, config.METRICS_FILE_NAME))

    def test_applied_gradients_respect_clip_norm(self, sample_documents, dev_split, monkeypatch):
        applied = []
        real_step = trainer.adam_step

        def recording_step(named, grads, *args):
            applied.append(global_norm(grads))
            return real_step(named, grads, *args)

        monkeypatch.setattr(trainer, "adam_step", recording_step)
        vocab, params = make_params(sample_documents)
        train(sample_documents, params, vocab, tiny_config(max_epochs=2, clip_norm=0.05), dev=dev_split)
        assert applied
        assert all(norm <= 0.05 + 1e-9 for norm in applied)
        assert max(applied) == pytest.approx(0.05)

    def test_isolated_anomaly_is_skipped(self, sample_documents, dev_split, monkeypatch):
        calls = []
        real_step = trainer.adam_step

        def flaky_step(named, grads, *args):
            calls.append(len(calls))
            if len(calls) == 1:
                raise NumericAnomalyError("non-finite gradient for 'head.weight'")
            return real_step(named, grads, *args)

        monkeypatch.setattr(trainer, "adam_step", flaky_step)
        vocab, params = make_params(sample_documents)
        result = train(sample_documents, params, vocab, tiny_config(max_epochs=2), dev=dev_split)
        assert result.epochs[0]["skipped"] == 1
        assert result.epochs[1]["skipped"] == 0

    def test_consecutive_anomalies_abort(self, sample_documents, dev_split, monkeypatch):
        def broken_step(named, grads, *args):
            raise NumericAnomalyError("non-finite gradient for 'head.weight'")

        monkeypatch.setattr(trainer, "adam_step", broken_step)
        monkeypatch.setattr(config, "MAX_CONSECUTIVE_ANOMALIES", 3)
        vocab, params = make_params(sample_documents)
        before = params.head.weight.data.copy()
        with pytest.raises(TrainingAbortedError):
            train(sample_documents, params, vocab, tiny_config(max_epochs=5), dev=dev_split)
        assert np.array_equal(params.head.weight.data, before)

    def test_holdout_used_without_dev(self, synthetic_dataset):
        vocab, params = make_params(synthetic_dataset)
        settings = tiny_config(max_epochs=1, token_budget=40, objective=ObjectiveConfig())
        result = train(synthetic_dataset, params, vocab, settings)
        assert result.best_dev_error is not None


@pytest.mark.slow
@pytest.mark.integration
class TestConvergence:
    """Test suite checking learning on generated corpora at the synthetic preset's scale"""

    @staticmethod
    def run_error(seed, **flags):
        run_config = cli.resolve_config(dict(flags, preset="synthetic", seed=seed, progress=False))
        _, report = cli.run_and_evaluate(run_config)
        return report.error_rate

    def test_supervised_training_learns_the_task(self):
        """ML alone reaches at most 10% test error within 20 epochs, averaged over five seeds"""
        errors = [self.run_error(seed, objective="ml") for seed in range(1, 6)]
        assert np.mean(errors) <= 0.10, f"per-seed errors {errors}"

    def test_unlabeled_objectives_beat_supervised_when_labels_are_scarce(self):
        """Adding EM and VAT on unlabeled text lowers the mean error of a weak-signal task"""
        scarce = dict(synth_labeled=50, synth_signal=0.55, synth_min_len=3, epochs=20)
        seeds = (1, 2, 3)
        supervised = [self.run_error(seed, objective="ml", **scarce) for seed in seeds]
        mixed = dict(objective=None, lambda_ml=1.0, lambda_at=0.0, lambda_em=1.0, lambda_vat=1.0, use_unlabeled=True)
        semi_supervised = [self.run_error(seed, **mixed, **scarce) for seed in seeds]
        assert np.mean(semi_supervised) < np.mean(supervised), \
            f"supervised {supervised}, semi-supervised {semi_supervised}"


if __name__ == "__main__":
    pytest.main(["-v", __file__])

import os
import sys
import pytest
import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from classifier_model import (
    GATES, ClassifierHead, LstmParams, ModelConfig, ModelParams, encode, forward, init_model, load_checkpoint,
    lstm_step, make_batch, predict_probs, pool_classify, save_checkpoint, embed_batch,
)
from errors import CheckpointError, ContractError
from numeric_core import Graph, Tensor, backward, finite_difference_gradient, make_rng, reduce_sum
from vocab_embed import PAD_INDEX, build_vocabulary, random_embeddings
from corpus import Example


@pytest.mark.unit
class TestModelShapes:
    """Test suite for parameter layout and initialization"""

    def test_parameter_count(self, tiny_model):
        vocab, params = tiny_model
        lstm = 4 * 8 * (4 + 8) + 4 * 8
        expected = len(vocab) * 4 + 2 * lstm + 3 * 16 + 3
        assert params.parameter_count() == expected

    def test_forget_gate_bias_starts_at_one(self, tiny_model):
        _, params = tiny_model
        _, bias = params.forward_lstm.gate("forget")
        np.testing.assert_array_equal(bias, np.ones(8))
        for gate in GATES:
            if gate != "forget":
                np.testing.assert_array_equal(params.forward_lstm.gate(gate)[1], np.zeros(8))

    def test_directions_do_not_share_weights(self, tiny_model):
        _, params = tiny_model
        assert params.forward_lstm.weight is not params.backward_lstm.weight
        assert not np.array_equal(params.forward_lstm.weight.data, params.backward_lstm.weight.data)

    def test_invalid_config(self):
        with pytest.raises(ContractError):
            ModelConfig(embed_dim=4, hidden_size=0, num_classes=2)

    def test_static_embedding_not_in_trainable_parameters(self, tiny_model):
        vocab, _ = tiny_model
        embedding = random_embeddings(vocab, 4, make_rng(0, "embedding"), finetune=False)
        params = init_model(ModelConfig(4, 8, 3), embedding, make_rng(0, "init"))
        names = [name for name, _ in params.named_parameters()]
        assert "embedding" not in names
        assert "head.weight" in names


@pytest.mark.unit
class TestForward:
    """Test suite for the BiLSTM-max forward pass"""

    def test_lstm_step_with_zero_weights(self, tiny_model):
        """Test the recurrence on a hand-checkable case: z = bias only"""
        _, params = tiny_model
        lstm = params.forward_lstm
        saved = lstm.weight.data.copy()
        lstm.weight.data[...] = 0.0
        try:
            h, c = lstm_step(Tensor(np.zeros(8)), Tensor(np.full(8, 2.0)), Tensor(np.ones(4)), lstm)
        finally:
            lstm.weight.data[...] = saved
        sig0, sig1 = 0.5, 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(c.data, sig1 * 2.0 + sig0 * 0.0)
        np.testing.assert_allclose(h.data, sig0 * np.tanh(c.data))

    def test_saturated_forget_gate_keeps_cell(self):
        """Test that a forget bias of +10 with silent weights carries the cell state through"""
        rng = np.random.default_rng(6)
        bias = np.zeros(32)
        bias[8:16] = 10.0
        lstm = LstmParams(Tensor(np.zeros((32, 12))), Tensor(bias))
        c_prev = rng.uniform(-1.0, 1.0, 8)
        _, c = lstm_step(Tensor(rng.normal(size=8)), Tensor(c_prev), Tensor(rng.normal(size=4)), lstm)
        assert np.max(np.abs(c.data - c_prev)) < 1e-4

    def test_lstm_step_gradients(self):
        """Test backprop through one step against central differences for weights, bias, state and input"""
        rng = np.random.default_rng(4)
        lstm = LstmParams(Tensor(rng.normal(0.0, 0.5, (32, 12)), requires_grad=True),
                          Tensor(rng.normal(0.0, 0.5, 32), requires_grad=True))
        h_prev = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        c_prev = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        weights_h, weights_c = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8)))

        def build():
            h, c = lstm_step(h_prev, c_prev, x, lstm)
            return reduce_sum(h * weights_h) + reduce_sum(c * weights_c)

        with Graph() as graph:
            loss = build()
        grads = backward(graph, loss)
        for name, tensor in (("weight", lstm.weight), ("bias", lstm.bias), ("h_prev", h_prev),
                             ("c_prev", c_prev), ("x", x)):
            numeric = finite_difference_gradient(lambda _: build(), tensor).data
            analytic = grads.array(tensor)
            error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert error < 1e-6, f"relative error {error:.2e} on '{name}'"

    def test_reversed_input_swaps_directions(self, tiny_model):
        """Test that reversing the input with swapped direction weights mirrors the two halves of H"""
        _, params = tiny_model
        swapped = ModelParams(params.config, params.embedding, [(params.backward_lstm, params.forward_lstm)],
                              params.head)
        v = np.random.default_rng(8).normal(size=(5, 4))
        H = encode(Tensor(v), params).data
        mirrored = encode(Tensor(v[::-1].copy()), swapped).data
        np.testing.assert_allclose(mirrored[:, :8], H[::-1, 8:], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(mirrored[:, 8:], H[::-1, :8], rtol=1e-12, atol=1e-15)

    def test_pooling_ignores_time_order(self, tiny_model):
        _, params = tiny_model
        rng = np.random.default_rng(3)
        H = rng.normal(size=(6, 16))
        order = rng.permutation(6)
        features, logits, probs = pool_classify(Tensor(H), params.head)
        shuffled = pool_classify(Tensor(H[order]), params.head)
        assert np.array_equal(features.data, shuffled[0].data)
        assert np.array_equal(logits.data, shuffled[1].data)
        assert np.array_equal(probs.data, shuffled[2].data)

    def test_zero_head_gives_uniform_probabilities(self, tiny_model, tiny_batches):
        _, params = tiny_model
        labeled, _ = tiny_batches
        silent = params.copy()
        silent.head = ClassifierHead(Tensor(np.zeros((3, 16))), Tensor(np.zeros(3)))
        probs = forward(silent, embed_batch(labeled, silent.embedding), labeled.mask).probs.data
        np.testing.assert_allclose(probs, np.full((labeled.size, 3), 1.0 / 3.0), rtol=1e-12)

    def test_max_pool_gradient_reaches_only_the_argmax(self, tiny_model):
        """Test that each feature's gradient lands on the time step that supplied its maximum"""
        _, params = tiny_model
        H = Tensor(np.random.default_rng(5).normal(size=(6, 16)), requires_grad=True)
        with Graph() as graph:
            _, logits, _ = pool_classify(H, params.head)
            loss = reduce_sum(logits)
        grad = backward(graph, loss).array(H)
        expected = np.zeros((6, 16))
        expected[H.data.argmax(axis=0), np.arange(16)] = params.head.weight.data.sum(axis=0)
        np.testing.assert_allclose(grad, expected, rtol=1e-12, atol=0.0)

    def test_probabilities_are_distributions(self, tiny_model, tiny_batches):
        _, params = tiny_model
        labeled, _ = tiny_batches
        probs = forward(params, embed_batch(labeled, params.embedding), labeled.mask).probs.data
        assert probs.shape == (labeled.size, 3)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(labeled.size))

    def test_encode_shape(self, tiny_model):
        _, params = tiny_model
        H = encode(Tensor(np.ones((5, 4))), params)
        assert H.shape == (5, 16)

    def test_single_example_matches_batch_of_one(self, tiny_model):
        vocab, params = tiny_model
        v = embed_batch(make_batch([("good", "movie")], vocab), params.embedding)
        batched = forward(params, v).logits.data[0]
        single = pool_classify(encode(Tensor(v.data[0]), params), params.head)[1].data
        np.testing.assert_allclose(single, batched, rtol=1e-12)

    def test_pad_extension_is_bit_identical(self, tiny_model):
        """Test that appending PAD positions (masked) leaves the logits unchanged"""
        vocab, params = tiny_model
        tokens = ("great", "fun", "movie")
        plain = make_batch([tokens], vocab)
        ids = np.concatenate([plain.ids, np.full((1, 3), PAD_INDEX)], axis=1)
        mask = np.concatenate([plain.mask, np.zeros((1, 3))], axis=1)
        v_plain = embed_batch(plain, params.embedding)
        v_padded = Tensor(params.embedding.weight.data[ids])
        expected = forward(params, v_plain, plain.mask).logits.data
        actual = forward(params, v_padded, mask).logits.data
        assert np.array_equal(expected, actual)

    def test_dropout_only_with_generator(self, tiny_model, tiny_batches):
        _, params = tiny_model
        labeled, _ = tiny_batches
        v = embed_batch(labeled, params.embedding)
        clean = forward(params, v, labeled.mask, p_drop=0.5).probs.data
        again = forward(params, v, labeled.mask, p_drop=0.5).probs.data
        noisy = forward(params, v, labeled.mask, p_drop=0.5, rng=make_rng(0, "dropout")).probs.data
        assert np.array_equal(clean, again)
        assert not np.array_equal(clean, noisy)

    def test_two_layer_model(self, tiny_model, tiny_batches):
        vocab, _ = tiny_model
        labeled, _ = tiny_batches
        embedding = random_embeddings(vocab, 4, make_rng(0, "embedding"))
        params = init_model(ModelConfig(4, 8, 3, num_layers=2), embedding, make_rng(0, "init"))
        assert params.layers[1][0].input_size == 16
        probs = forward(params, embed_batch(labeled, embedding), labeled.mask).probs.data
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(labeled.size))


@pytest.mark.unit
class TestBatch:
    """Test suite for padded batches"""

    def test_padding_and_mask(self, tiny_model):
        vocab, _ = tiny_model
        batch = make_batch([("good",), ("bad", "plot", "movie")], vocab, [0, 1])
        assert batch.ids.shape == (2, 3)
        assert batch.ids[0, 1] == PAD_INDEX
        np.testing.assert_array_equal(batch.mask, [[1, 0, 0], [1, 1, 1]])
        assert batch.num_tokens == 4
        assert batch.labels.tolist() == [0, 1]

    def test_empty_batch(self, tiny_model):
        vocab, _ = tiny_model
        with pytest.raises(ContractError):
            make_batch([], vocab)

    def test_predict_probs_is_deterministic(self, tiny_model, sample_documents):
        vocab, params = tiny_model
        first = predict_probs(params, sample_documents.labeled, vocab, batch_size=2)
        second = predict_probs(params, sample_documents.labeled, vocab, batch_size=2)
        assert np.array_equal(first, second)
        assert first.shape == (4, 3)


@pytest.mark.unit
class TestCheckpoint:
    """Test suite for checkpoint files"""

    def test_round_trip(self, tiny_model, temp_test_directory):
        vocab, params = tiny_model
        path = os.path.join(temp_test_directory, "model.npz")
        save_checkpoint(path, params, vocab.hash(), {"seed": 1}, extras={"adam_m/head.bias": np.ones(3)},
                        extra_meta={"step": 7})
        loaded = load_checkpoint(path, vocab)
        for (name, original), (_, restored) in zip(params.named_tensors(), loaded.params.named_tensors()):
            assert np.array_equal(original.data, restored.data), f"Tensor '{name}' changed"
        assert loaded.meta["config"] == {"seed": 1}
        assert loaded.meta["extra"] == {"step": 7}
        np.testing.assert_array_equal(loaded.extras["adam_m/head.bias"], np.ones(3))

    def test_missing_file(self, temp_test_directory):
        path = os.path.join(temp_test_directory, "absent.npz")
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path)
        assert path in str(info.value)
        assert info.value.exit_code == 4

    def test_vocabulary_mismatch(self, tiny_model, temp_test_directory):
        vocab, params = tiny_model
        path = os.path.join(temp_test_directory, "mismatch.npz")
        save_checkpoint(path, params, vocab.hash())
        other = build_vocabulary([Example(("x", "y"))], 5)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other)

    def test_detached_shares_buffers(self, tiny_model):
        _, params = tiny_model
        frozen = params.detached()
        assert frozen.head.weight.data is params.head.weight.data
        assert not frozen.head.weight.requires_grad
        assert frozen.named_parameters() == []

    def test_copy_is_independent(self, tiny_model):
        _, params = tiny_model
        clone = params.copy()
        clone.head.bias.data += 1.0
        assert not np.array_equal(clone.head.bias.data, params.head.bias.data)


if __name__ == "__main__":
    pytest.main(["-v", __file__])

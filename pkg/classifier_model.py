"""
BiLSTM-max text classifier: embeddings -> bidirectional LSTM -> max-pool over
time -> affine -> softmax, plus padded batches and checkpoint files.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from errors import CheckpointError, ContractError, DimensionError
from numeric_core import (
    Tensor, apply_dropout, concat, dropout_mask, matmul, max_over_axis, sigmoid,
    softmax, stack, take_slice, tanh,
)
from vocab_embed import PAD_INDEX, EmbeddingMatrix, lookup_indices

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mixedobj-checkpoint-v1"

# Row blocks of the fused LSTM weight, in order
GATES = ("input", "forget", "output", "cell")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    hidden_size: int
    num_classes: int
    num_layers: int = 1

    def __post_init__(self):
        for name in ("embed_dim", "hidden_size", "num_classes", "num_layers"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def feature_size(self):
        """n: concatenated forward + backward hidden size"""
        return 2 * self.hidden_size


class LstmParams:
    """One LSTM direction.

    ``weight`` stacks the input, forget, output and cell-candidate matrices
    (each hidden x (input + hidden)) row-wise; ``bias`` stacks their biases.
    """

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias
        if weight.ndim != 2 or weight.shape[0] % 4 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"LSTM weight {weight.shape} and bias {bias.shape} are inconsistent")

    @property
    def hidden_size(self):
        return self.weight.shape[0] // 4

    @property
    def input_size(self):
        return self.weight.shape[1] - self.hidden_size

    def gate(self, name):
        """(weight rows, bias) views of one gate"""
        h = self.hidden_size
        k = GATES.index(name)
        return self.weight.data[k * h:(k + 1) * h], self.bias.data[k * h:(k + 1) * h]

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def detached(self):
        return LstmParams(self.weight.detach(), self.bias.detach())


class ClassifierHead:
    def __init__(self, weight, bias):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"head weight {weight.shape} and bias {bias.shape} are inconsistent")
        self.weight = weight
        self.bias = bias

    def detached(self):
        return ClassifierHead(self.weight.detach(), self.bias.detach())


class ModelParams:
    """All parameters of the classifier: θ"""

    def __init__(self, config, embedding, layers, head):
        self.config = config
        self.embedding = embedding
        self.layers = list(layers)
        self.head = head
        self._check_shapes()

    def _check_shapes(self):
        cfg = self.config
        if self.embedding.dim != cfg.embed_dim:
            raise DimensionError(f"embedding dim {self.embedding.dim} differs from config {cfg.embed_dim}")
        if len(self.layers) != cfg.num_layers:
            raise DimensionError(f"{len(self.layers)} layers given, config says {cfg.num_layers}")
        input_size = cfg.embed_dim
        for forward_lstm, backward_lstm in self.layers:
            if forward_lstm.weight is backward_lstm.weight:
                raise ContractError("forward and backward directions must not share tensors")
            for lstm in (forward_lstm, backward_lstm):
                if lstm.hidden_size != cfg.hidden_size or lstm.input_size != input_size:
                    raise DimensionError(f"LSTM weight {lstm.weight.shape} does not fit "
                                         f"input {input_size} / hidden {cfg.hidden_size}")
            input_size = cfg.feature_size
        if self.head.weight.shape != (cfg.num_classes, cfg.feature_size):
            raise DimensionError(f"head weight {self.head.weight.shape} does not fit "
                                 f"K={cfg.num_classes}, n={cfg.feature_size}")

    @property
    def forward_lstm(self):
        return self.layers[0][0]

    @property
    def backward_lstm(self):
        return self.layers[0][1]

    def named_tensors(self):
        """Every parameter tensor with its checkpoint name"""
        named = [("embedding", self.embedding.weight)]
        for i, (forward_lstm, backward_lstm) in enumerate(self.layers):
            for direction, lstm in (("forward", forward_lstm), ("backward", backward_lstm)):
                for suffix, tensor in lstm.tensors():
                    named.append((f"layer{i}.{direction}.{suffix}", tensor))
        named.append(("head.weight", self.head.weight))
        named.append(("head.bias", self.head.bias))
        return named

    def named_parameters(self):
        """Trainable tensors only; the embedding is included iff it is finetuned"""
        return [(name, t) for name, t in self.named_tensors() if t.requires_grad]

    def parameter_count(self):
        return int(sum(t.size for _, t in self.named_tensors()))

    def detached(self):
        """θ̂: a constant copy sharing the same buffers"""
        return ModelParams(
            self.config,
            self.embedding.detached(),
            [(f.detached(), b.detached()) for f, b in self.layers],
            self.head.detached(),
        )

    def copy(self):
        """Deep copy with independent buffers"""
        embedding = EmbeddingMatrix(self.embedding.weight.data.copy(), finetune=self.embedding.finetune)
        layers = [
            tuple(LstmParams(Tensor(l.weight.data.copy(), requires_grad=True),
                             Tensor(l.bias.data.copy(), requires_grad=True)) for l in pair)
            for pair in self.layers
        ]
        head = ClassifierHead(Tensor(self.head.weight.data.copy(), requires_grad=True),
                              Tensor(self.head.bias.data.copy(), requires_grad=True))
        return ModelParams(self.config, embedding, layers, head)


def init_lstm(input_size, hidden_size, rng):
    """Uniform ±1/sqrt(fan-in) weights, forget-gate bias 1, other biases 0"""
    fan_in = input_size + hidden_size
    bound = 1.0 / math.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(4 * hidden_size, fan_in))
    bias = np.zeros(4 * hidden_size)
    forget = GATES.index("forget")
    bias[forget * hidden_size:(forget + 1) * hidden_size] = 1.0
    return LstmParams(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))


def init_model(config, embedding, rng):
    layers = []
    input_size = config.embed_dim
    for _ in range(config.num_layers):
        layers.append((init_lstm(input_size, config.hidden_size, rng),
                       init_lstm(input_size, config.hidden_size, rng)))
        input_size = config.feature_size
    bound = 1.0 / math.sqrt(config.feature_size)
    head = ClassifierHead(
        Tensor(rng.uniform(-bound, bound, size=(config.num_classes, config.feature_size)), requires_grad=True),
        Tensor(np.zeros(config.num_classes), requires_grad=True),
    )
    params = ModelParams(config, embedding, layers, head)
    logger.info("Initialized BiLSTM-max model: %d parameters", params.parameter_count())
    return params


# =============================================================================
# Forward computation
# =============================================================================

def lstm_step(h_prev, c_prev, x_t, params):
    """One LSTM recurrence step; inputs are (..., features) tensors"""
    h = params.hidden_size
    z = matmul(concat([x_t, h_prev]), params.weight, trans_b=True) + params.bias
    i = sigmoid(take_slice(z, (Ellipsis, slice(0, h))))
    f = sigmoid(take_slice(z, (Ellipsis, slice(h, 2 * h))))
    o = sigmoid(take_slice(z, (Ellipsis, slice(2 * h, 3 * h))))
    g = tanh(take_slice(z, (Ellipsis, slice(3 * h, 4 * h))))
    c = f * c_prev + i * g
    return o * tanh(c), c


def run_direction(x, params, mask=None, reverse=False):
    """Hidden states of one direction over a (B, T, d) input, as (B, T, h).

    Where ``mask`` is 0 the state carries over unchanged, so padding at the
    end of a sequence never reaches the reverse direction's real positions.
    """
    batch, steps = x.shape[0], x.shape[1]
    h = Tensor(np.zeros((batch, params.hidden_size)))
    c = Tensor(np.zeros((batch, params.hidden_size)))
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h_new, c_new = lstm_step(h, c, take_slice(x, (slice(None), t, slice(None))), params)
        if mask is not None and not mask[:, t].all():
            keep = Tensor(mask[:, t:t + 1])
            carry = Tensor(1.0 - mask[:, t:t + 1])
            h = keep * h_new + carry * h
            c = keep * c_new + carry * c
        else:
            h, c = h_new, c_new
        outputs[t] = h
    return stack(outputs, axis=1)


def _dropout(x, p_drop, rng):
    if rng is None or p_drop <= 0.0:
        return x
    return apply_dropout(x, dropout_mask(x.shape, p_drop, rng))


def encode(v, params, mask=None, p_drop=0.0, rng=None):
    """H = [forward states ; backward states] for a (T, d) or (B, T, d) input.

    Initial hidden and cell states are zero. Layer l > 0 reads layer l-1's
    H through dropout.
    """
    single = v.ndim == 2
    if single:
        v = stack([v], axis=0)
    if v.ndim != 3 or v.shape[1] < 1:
        raise DimensionError(f"encode: expected (T, d) or (B, T, d) input with T >= 1, got {v.shape}")
    x = v
    for layer, (forward_lstm, backward_lstm) in enumerate(params.layers):
        if layer > 0:
            x = _dropout(x, p_drop, rng)
        forward_states = run_direction(x, forward_lstm, mask, reverse=False)
        backward_states = run_direction(x, backward_lstm, mask, reverse=True)
        x = concat([forward_states, backward_states], axis=-1)
    if single:
        x = take_slice(x, 0)
    return x


def pool_classify(H, head, mask=None):
    """Max over time, then logits = Wh + b and softmax probabilities"""
    time_axis = H.ndim - 2
    if H.shape[time_axis] < 1:
        raise DimensionError(f"pool_classify: empty sequence {H.shape}")
    pool_mask = None if mask is None else np.asarray(mask)[..., None]
    features, _ = max_over_axis(H, axis=time_axis, mask=pool_mask)
    logits = matmul(features, head.weight, trans_b=True) + head.bias
    return features, logits, softmax(logits)


class Forward(NamedTuple):
    features: Tensor
    logits: Tensor
    probs: Tensor


def forward(params, v, mask=None, p_drop=0.0, rng=None):
    """Full classifier pass over embedded input ``v``.

    Dropout (embeddings, between layers, encoder states) is active only when
    a generator is given and ``p_drop`` > 0.
    """
    v = _dropout(v, p_drop, rng)
    H = encode(v, params, mask, p_drop, rng)
    H = _dropout(H, p_drop, rng)
    return Forward(*pool_classify(H, params.head, mask))


# =============================================================================
# Batches
# =============================================================================

@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.ids.shape[0]

    @property
    def num_tokens(self):
        return int(self.mask.sum())

    @property
    def max_len(self):
        return self.ids.shape[1]


def make_batch(token_lists, vocab, labels=None):
    """Pad token lists to the longest one with PAD; mask marks real tokens"""
    token_lists = [list(tokens) for tokens in token_lists]
    if not token_lists:
        raise ContractError("cannot build an empty batch")
    width = max(len(tokens) for tokens in token_lists)
    ids = np.full((len(token_lists), width), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((len(token_lists), width))
    for row, tokens in enumerate(token_lists):
        ids[row, :len(tokens)] = vocab.indices(tokens)
        mask[row, :len(tokens)] = 1.0
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    return Batch(ids, mask, labels)


def embed_batch(batch, embedding):
    return lookup_indices(batch.ids, embedding)


def predict_probs(params, examples, vocab, batch_size=32):
    """Class probabilities for ``examples`` with every stochastic layer off"""
    examples = list(examples)
    chunks = []
    for start in range(0, len(examples), batch_size):
        part = examples[start:start + batch_size]
        batch = make_batch([ex.tokens for ex in part], vocab)
        out = forward(params, embed_batch(batch, params.embedding), batch.mask)
        chunks.append(out.probs.data)
    if not chunks:
        return np.zeros((0, params.config.num_classes))
    return np.concatenate(chunks, axis=0)


# =============================================================================
# Checkpoints
# =============================================================================

class Checkpoint(NamedTuple):
    params: ModelParams
    meta: dict
    extras: dict


def save_checkpoint(path, params, vocab_hash, config_snapshot=None, extras=None, extra_meta=None):
    """Write every parameter tensor plus a JSON header to a .npz container"""
    arrays = {f"param/{name}": tensor.data for name, tensor in params.named_tensors()}
    for key, value in (extras or {}).items():
        arrays[f"extra/{key}"] = np.asarray(value)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "vocab_hash": vocab_hash,
        "model_config": asdict(params.config),
        "embedding_finetune": params.embedding.finetune,
        "shapes": {name: list(t.shape) for name, t in params.named_tensors()},
        "config": config_snapshot or {},
        "extra": extra_meta or {},
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    logger.info("Saving checkpoint: %s", path)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        np.savez(handle, **arrays)
    os.replace(tmp_path, path)


def _expected_shapes(config, vocab_rows):
    shapes = {"embedding": (vocab_rows, config.embed_dim)}
    input_size = config.embed_dim
    for i in range(config.num_layers):
        for direction in ("forward", "backward"):
            shapes[f"layer{i}.{direction}.weight"] = (4 * config.hidden_size, input_size + config.hidden_size)
            shapes[f"layer{i}.{direction}.bias"] = (4 * config.hidden_size,)
        input_size = config.feature_size
    shapes["head.weight"] = (config.num_classes, config.feature_size)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def load_checkpoint(path, vocab=None):
    """Rebuild model parameters; fails on any shape or vocabulary-hash mismatch"""
    if not os.path.exists(path):
        raise CheckpointError(path, "checkpoint file not found")
    logger.info("Loading checkpoint: %s", path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
        meta = json.loads(str(arrays.pop("__meta__")))
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(path, f"unreadable checkpoint ({e})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(path, f"unknown format {meta.get('format')!r}")
    if vocab is not None and vocab.hash() != meta["vocab_hash"]:
        raise CheckpointError(path, "vocabulary hash does not match the checkpoint")

    config = ModelConfig(**meta["model_config"])
    embedding_rows = arrays.get("param/embedding", np.zeros((0, 0))).shape[0]
    if vocab is not None and embedding_rows != len(vocab):
        raise CheckpointError(path, f"embedding has {embedding_rows} rows, vocabulary has {len(vocab)}")
    expected = _expected_shapes(config, embedding_rows)
    for name, shape in expected.items():
        stored = arrays.get(f"param/{name}")
        if stored is None:
            raise CheckpointError(path, f"missing tensor '{name}'")
        if stored.shape != shape:
            raise CheckpointError(path, f"tensor '{name}' has shape {stored.shape}, expected {shape}")

    def trainable(name):
        return Tensor(arrays[f"param/{name}"].astype(np.float64), requires_grad=True)

    embedding = EmbeddingMatrix(arrays["param/embedding"], finetune=meta["embedding_finetune"])
    layers = []
    for i in range(config.num_layers):
        layers.append(tuple(
            LstmParams(trainable(f"layer{i}.{d}.weight"), trainable(f"layer{i}.{d}.bias"))
            for d in ("forward", "backward")
        ))
    head = ClassifierHead(trainable("head.weight"), trainable("head.bias"))
    extras = {key[len("extra/"):]: value for key, value in arrays.items() if key.startswith("extra/")}
    return Checkpoint(ModelParams(config, embedding, layers, head), meta, extras)

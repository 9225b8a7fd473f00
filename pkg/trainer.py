"""
Training loop: token-budget batching, Adam with per-epoch exponential decay,
global-norm gradient clipping, labeled/unlabeled interleaving, metrics log,
best/last checkpoints and resume.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np
from tqdm import tqdm

import config
from classifier_model import load_checkpoint, make_batch, predict_probs, save_checkpoint
from corpus import holdout_split
from errors import (
    ConfigurationError, ContractError, NumericAnomalyError, TrainingAbortedError,
)
from numeric_core import Graph, RngStreams, backward
from objectives import ObjectiveConfig, loss_mixed
from vocab_embed import apply_word_dropout

logger = logging.getLogger(__name__)

UNLABELED_BATCHING_MODES = ("tokens", "examples")


@dataclass
class TrainConfig:
    token_budget: int = 3000
    learning_rate: float = config.LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    adam_epsilon: float = config.ADAM_EPSILON
    decay_rate: float = config.DECAY_RATE
    max_epochs: int = config.EPOCHS_SUPERVISED
    clip_norm: float = config.CLIP_NORM
    p_drop: float = config.P_DROP
    p_w: float = config.P_WORD
    seed: int = config.SEED
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    eval_every: int = 0
    unlabeled_batching: str = config.UNLABELED_BATCHING
    progress: bool = False

    def validate(self):
        if self.token_budget < 1:
            raise ConfigurationError("token_budget", f"must be >= 1, got {self.token_budget}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigurationError("beta1", f"must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigurationError("beta2", f"must be in [0, 1), got {self.beta2}")
        if self.adam_epsilon <= 0:
            raise ConfigurationError("adam_epsilon", f"must be > 0, got {self.adam_epsilon}")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigurationError("decay_rate", f"must be in (0, 1], got {self.decay_rate}")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs", f"must be >= 0, got {self.max_epochs}")
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm", f"must be > 0, got {self.clip_norm}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigurationError("p_drop", f"must be in [0, 1), got {self.p_drop}")
        if not 0.0 <= self.p_w < 1.0:
            raise ConfigurationError("p_w", f"must be in [0, 1), got {self.p_w}")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every", f"must be >= 0, got {self.eval_every}")
        if self.unlabeled_batching not in UNLABELED_BATCHING_MODES:
            raise ConfigurationError("unlabeled_batching", f"must be one of {UNLABELED_BATCHING_MODES}")
        self.objective.validate()
        return self


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name"""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, named_params):
        return cls({name: np.zeros(t.shape) for name, t in named_params},
                   {name: np.zeros(t.shape) for name, t in named_params})

    def to_arrays(self):
        arrays = {f"adam_m/{name}": value for name, value in self.m.items()}
        arrays.update({f"adam_v/{name}": value for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays, names, step):
        try:
            return cls({name: np.array(arrays[f"adam_m/{name}"]) for name in names},
                       {name: np.array(arrays[f"adam_v/{name}"]) for name in names}, step)
        except KeyError as e:
            raise ContractError(f"optimizer state lacks {e}") from None


# =============================================================================
# Batching
# =============================================================================

def _pack(order, lengths, token_budget):
    batches, current, used = [], [], 0
    for index in order:
        length = lengths[index]
        if current and used + length > token_budget:
            batches.append(current)
            current, used = [], 0
        current.append(int(index))
        used += length
    if current:
        batches.append(current)
    return batches


def _check_budget(lengths, token_budget):
    for index, length in enumerate(lengths):
        if length > token_budget:
            raise ConfigurationError("token_budget",
                                     f"document {index} has {length} tokens, above the budget {token_budget}")


def plan_batch_indices(lengths, token_budget, rng=None):
    """Greedy packing of (optionally shuffled) documents into token-budget batches.

    A batch closes when the next document would push it past the budget; no
    document is split. With ``rng=None`` the given order is kept.
    """
    lengths = [int(n) for n in lengths]
    _check_budget(lengths, token_budget)
    order = np.arange(len(lengths)) if rng is None else rng.permutation(len(lengths))
    return _pack(order, lengths, token_budget)


def plan_batches(examples, token_budget, rng=None):
    examples = list(examples)
    return [[examples[i] for i in batch]
            for batch in plan_batch_indices([len(ex) for ex in examples], token_budget, rng)]


class UnlabeledCycler:
    """Endless stream of unlabeled batches, reshuffled on every pass.

    In ``tokens`` mode a batch fills the same token budget as labeled batches;
    in ``examples`` mode it holds as many documents as the labeled batch.
    """

    def __init__(self, examples, token_budget, rng, mode="tokens"):
        if mode not in UNLABELED_BATCHING_MODES:
            raise ConfigurationError("unlabeled_batching", f"must be one of {UNLABELED_BATCHING_MODES}")
        self.examples = list(examples)
        if not self.examples:
            raise ContractError("no unlabeled examples to cycle over")
        self.lengths = [len(ex) for ex in self.examples]
        if mode == "tokens":
            _check_budget(self.lengths, token_budget)
        self.token_budget = token_budget
        self.mode = mode
        self.rng = rng
        self.passes = 0
        self._start_pass()

    def _start_pass(self):
        self.order = self.rng.permutation(len(self.examples))
        self.position = 0
        self._plan = _pack(self.order, self.lengths, self.token_budget) if self.mode == "tokens" else None

    def next_batch(self, labeled_count):
        if self.mode == "tokens":
            if self.position >= len(self._plan):
                self.passes += 1
                self._start_pass()
            indices = self._plan[self.position]
            self.position += 1
        else:
            count = min(labeled_count, len(self.examples))
            if self.position + count > len(self.examples):
                self.passes += 1
                self._start_pass()
            indices = self.order[self.position:self.position + count].tolist()
            self.position += count
        return [self.examples[i] for i in indices]

    def state(self):
        return {"passes": self.passes, "position": self.position}, np.asarray(self.order)

    def restore(self, state, order):
        self.passes = int(state["passes"])
        self.order = np.asarray(order, dtype=np.int64)
        self.position = int(state["position"])
        self._plan = _pack(self.order, self.lengths, self.token_budget) if self.mode == "tokens" else None


# =============================================================================
# Optimizer
# =============================================================================

def adam_step(named_params, grads, state, lr, beta1, beta2, adam_epsilon):
    """Bias-corrected Adam update applied in place.

    Raises NumericAnomalyError, leaving parameters and state untouched, when a
    gradient holds a non-finite value.
    """
    for name, _ in named_params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericAnomalyError(f"non-finite gradient for '{name}'")
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, tensor in named_params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + adam_epsilon)
    return state


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, clip_norm):
    """Scale every gradient by clip_norm / ‖g‖ when the global norm exceeds clip_norm.

    Returns (grads, norm before clipping, whether clipping happened).
    """
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        return {name: g * factor for name, g in grads.items()}, norm, True
    return grads, norm, False


def lr_schedule(epoch, base_lr, decay_rate):
    if not 0.0 < decay_rate <= 1.0:
        raise ConfigurationError("decay_rate", f"must be in (0, 1], got {decay_rate}")
    return base_lr * decay_rate ** epoch


# =============================================================================
# Training
# =============================================================================

def error_rate(params, dataset, vocab):
    """Fraction of misclassified labeled examples (None for an empty split)"""
    if not dataset.labeled:
        return None
    probs = predict_probs(params, dataset.labeled, vocab, config.EVAL_BATCH_SIZE)
    return float(np.mean(np.argmax(probs, axis=1) != dataset.labels()))


class MetricsLog:
    """Line-delimited JSON records with sorted keys"""

    def __init__(self, path=None, append=False):
        self.path = path
        self.records = []
        self._handle = None
        if path is not None:
            self._handle = open(path, "a" if append else "w", encoding="utf-8", newline="\n")

    def write(self, record):
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")
            self._handle.flush()

    def offset(self):
        return self._handle.tell() if self._handle is not None else 0

    def close(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None


class TrainResult(NamedTuple):
    params: object
    best_params: object
    best_dev_error: Optional[float]
    epochs: List[dict]
    run_dir: Optional[str]


def _gradients(graph, total, named_params):
    if not total.requires_grad:
        return {name: np.zeros(t.shape) for name, t in named_params}
    gmap = backward(graph, total)
    return {name: gmap.array(t) for name, t in named_params}


def _restore(path, params, vocab, rngs, named):
    checkpoint = load_checkpoint(path, vocab)
    loaded = dict(checkpoint.params.named_tensors())
    for name, tensor in params.named_tensors():
        tensor.data[...] = loaded[name].data
    meta = checkpoint.meta["extra"]
    state = OptimizerState.from_arrays(checkpoint.extras, [name for name, _ in named], meta["adam_step"])
    rngs.restore(meta["rng_state"])
    return meta, state, checkpoint.extras


def train(dataset, params, vocab, train_config, dev=None, run_dir=None, resume=False, config_snapshot=None):
    """Optimize ``params`` in place on ``dataset`` and return the run summary.

    When ``run_dir`` is set the metrics log, best.npz (lowest dev error) and
    last.npz (resume point, written after every epoch) go there.
    """
    train_config.validate()
    objective = train_config.objective
    if not dataset.labeled:
        raise ContractError("training needs labeled examples")
    rngs = RngStreams(train_config.seed)
    if dev is None:
        dataset, dev = holdout_split(dataset, config.DEV_FRACTION, rngs["holdout"])
        logger.info("Held out %d labeled examples as dev split", dev.num_labeled)

    named = params.named_parameters()
    state = OptimizerState.zeros(named)
    cycler = None
    if objective.needs_unlabeled:
        if dataset.unlabeled:
            cycler = UnlabeledCycler(dataset.unlabeled, train_config.token_budget, rngs["unlabeled"],
                                     train_config.unlabeled_batching)
        else:
            logger.warning("Unlabeled terms enabled but the dataset has no unlabeled examples")

    lengths = [len(ex) for ex in dataset.labeled]
    _check_budget(lengths, train_config.token_budget)

    start_epoch, step, anomalies = 0, 0, 0
    best_dev_error = None
    history = []
    last_path = best_path = None
    metrics_offset = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        last_path = os.path.join(run_dir, config.LAST_CHECKPOINT_NAME)
        best_path = os.path.join(run_dir, config.BEST_CHECKPOINT_NAME)
        if resume and os.path.exists(last_path):
            meta, state, extras = _restore(last_path, params, vocab, rngs, named)
            start_epoch, step = meta["epochs_completed"], meta["step"]
            best_dev_error = meta["best_dev_error"]
            history = meta["history"]
            metrics_offset = meta["metrics_offset"]
            if cycler is not None and meta.get("cycler") is not None:
                cycler.restore(meta["cycler"], extras["unlabeled_order"])
            logger.info("Resuming from %s after epoch %d", last_path, start_epoch)
        elif resume:
            logger.warning("No checkpoint to resume from in %s; starting fresh", run_dir)

    metrics_path = os.path.join(run_dir, config.METRICS_FILE_NAME) if run_dir is not None else None
    if metrics_path is not None and metrics_offset is not None and os.path.exists(metrics_path):
        with open(metrics_path, "r+b") as handle:
            handle.truncate(metrics_offset)
    metrics = MetricsLog(metrics_path, append=metrics_offset is not None)
    if metrics_offset is not None and os.path.exists(best_path):
        best_params = load_checkpoint(best_path, vocab).params
    else:
        best_params = params.copy()

    try:
        for epoch in range(start_epoch, train_config.max_epochs):
            lr = lr_schedule(epoch, train_config.learning_rate, train_config.decay_rate)
            batches = plan_batch_indices(lengths, train_config.token_budget, rngs["batching"])
            totals = []
            skipped = 0
            progress = tqdm(batches, desc=f"epoch {epoch + 1}/{train_config.max_epochs}", unit="batch",
                            disable=not train_config.progress, leave=False)
            for indices in progress:
                examples = [dataset.labeled[i] for i in indices]
                labeled_batch = make_batch(
                    [apply_word_dropout(ex.tokens, train_config.p_w, rngs["word_dropout"]) for ex in examples],
                    vocab, [ex.label for ex in examples])
                unlabeled_batch = None
                if cycler is not None:
                    unlabeled_batch = make_batch(
                        [apply_word_dropout(ex.tokens, train_config.p_w, rngs["word_dropout"])
                         for ex in cycler.next_batch(len(examples))], vocab)

                with Graph() as graph:
                    breakdown = loss_mixed(labeled_batch, unlabeled_batch, params, objective, rngs,
                                           train_config.p_drop)
                grads = _gradients(graph, breakdown.graph_total, named)
                grads, norm, clipped = clip_gradients(grads, train_config.clip_norm)
                step += 1
                try:
                    adam_step(named, grads, state, lr, train_config.beta1, train_config.beta2,
                              train_config.adam_epsilon)
                    anomalies = 0
                    skipped_step = False
                except NumericAnomalyError as e:
                    anomalies += 1
                    skipped += 1
                    skipped_step = True
                    logger.warning("Skipping step %d: %s (%d consecutive)", step, e, anomalies)
                    if anomalies >= config.MAX_CONSECUTIVE_ANOMALIES:
                        raise TrainingAbortedError(
                            f"{anomalies} consecutive anomalous steps at step {step}") from None
                totals.append(breakdown.total)
                record = breakdown.as_record()
                record.update({"type": "step", "epoch": epoch, "step": step, "lr": lr,
                               "grad_norm": norm, "clipped": clipped, "skipped": skipped_step,
                               "batch_tokens": labeled_batch.num_tokens})
                metrics.write(record)
                if train_config.eval_every and step % train_config.eval_every == 0:
                    metrics.write({"type": "dev_check", "epoch": epoch, "step": step,
                                   "dev_error": error_rate(params, dev, vocab)})

            dev_error = error_rate(params, dev, vocab)
            summary = {"type": "epoch", "epoch": epoch, "lr": lr, "steps": len(batches), "skipped": skipped,
                       "train_loss": float(np.mean(totals)) if totals else None, "dev_error": dev_error}
            metrics.write(summary)
            history.append(summary)
            logger.info("Epoch %d: train loss %s, dev error %s", epoch + 1, summary["train_loss"], dev_error)

            improved = dev_error is None or best_dev_error is None or dev_error < best_dev_error
            if improved:
                best_dev_error = dev_error
                best_params = params.copy()
                if best_path is not None:
                    save_checkpoint(best_path, params, vocab.hash(), config_snapshot,
                                    extra_meta={"epoch": epoch, "dev_error": dev_error})
            if last_path is not None:
                cycler_state, order = cycler.state() if cycler is not None else (None, np.zeros(0))
                extras = state.to_arrays()
                extras["unlabeled_order"] = order
                save_checkpoint(last_path, params, vocab.hash(), config_snapshot, extras=extras, extra_meta={
                    "epochs_completed": epoch + 1, "step": step, "adam_step": state.step,
                    "best_dev_error": best_dev_error, "rng_state": rngs.state(), "cycler": cycler_state,
                    "history": history, "metrics_offset": metrics.offset(),
                })
    finally:
        metrics.close()

    return TrainResult(params, best_params, best_dev_error, history, run_dir)

"""
Evaluation reports, embedding nearest neighbors, probability ensembles and
parameter sweeps.
"""

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
from openpyxl.utils import get_column_letter

import config
from classifier_model import predict_probs
from errors import ConfigurationError, ContractError, VocabularyLookupError
from vocab_embed import PAD_INDEX, UNK_INDEX

logger = logging.getLogger(__name__)

# Order in which ensemble members and weights are listed
ENSEMBLE_MEMBERS = ("ml", "at", "vat", "em")


@dataclass
class EvalReport:
    error_rate: float
    confusion: np.ndarray
    bin_edges: np.ndarray
    hist_correct: np.ndarray
    hist_incorrect: np.ndarray
    n: int

    def histogram_frame(self):
        return pd.DataFrame({
            "bin_low": self.bin_edges[:-1],
            "bin_high": self.bin_edges[1:],
            "correct": self.hist_correct,
            "incorrect": self.hist_incorrect,
        })

    def to_record(self):
        return {
            "error_rate": self.error_rate,
            "n": self.n,
            "confusion": self.confusion.tolist(),
            "bin_edges": self.bin_edges.tolist(),
            "hist_correct": self.hist_correct.tolist(),
            "hist_incorrect": self.hist_incorrect.tolist(),
        }


def probability_histogram(probs, correct, bins=config.HISTOGRAM_BINS):
    """Counts of max-class probability in equal bins over [1/K, 1], split by correctness"""
    num_classes = probs.shape[1]
    edges = np.linspace(1.0 / num_classes, 1.0, bins + 1)
    top = probs.max(axis=1)
    index = np.clip(np.searchsorted(edges, top, side="right") - 1, 0, bins - 1)
    return (edges,
            np.bincount(index[correct], minlength=bins),
            np.bincount(index[~correct], minlength=bins))


def report_from_probs(probs, labels, bins=config.HISTOGRAM_BINS):
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("evaluation needs at least one example")
    if labels.shape != (probs.shape[0],):
        raise ContractError(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")
    num_classes = probs.shape[1]
    predicted = np.argmax(probs, axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    correct = predicted == labels
    edges, hist_correct, hist_incorrect = probability_histogram(probs, correct, bins)
    return EvalReport(float(np.mean(~correct)), confusion, edges, hist_correct, hist_incorrect, len(labels))


def evaluate(params, dataset, vocab, bins=config.HISTOGRAM_BINS):
    """Error rate, confusion counts and probability histogram on a labeled split.

    Dropout, word dropout and perturbations are all off.
    """
    if not dataset.labeled:
        raise ContractError(f"split '{dataset.split}' has no labeled examples to evaluate")
    probs = predict_probs(params, dataset.labeled, vocab, config.EVAL_BATCH_SIZE)
    return report_from_probs(probs, dataset.labels(), bins)


def nearest_neighbors(word, embedding, vocab, k=config.NEIGHBORS_K):
    """Top-k words by cosine similarity to ``word``, from an exhaustive scan.

    The query itself, UNK and PAD are never returned; equal similarities keep
    vocabulary order.
    """
    if word not in vocab:
        raise VocabularyLookupError(f"'{word}' is not in the vocabulary")
    query = vocab.index(word)
    candidates = np.array([i for i in range(len(vocab)) if i not in (query, UNK_INDEX, PAD_INDEX)], dtype=np.int64)
    if not 1 <= k <= len(candidates):
        raise ContractError(f"k must be in [1, {len(candidates)}], got {k}")
    matrix = embedding.weight.data
    norms = np.linalg.norm(matrix, axis=1)
    denominator = norms * norms[query]
    with np.errstate(divide="ignore", invalid="ignore"):
        cosine = np.where(denominator > 0, matrix @ matrix[query] / denominator, 0.0)
    order = np.lexsort((candidates, -cosine[candidates]))
    return [(vocab.itos[candidates[i]], float(cosine[candidates[i]])) for i in order[:k]]


# =============================================================================
# Ensembles
# =============================================================================

@dataclass(frozen=True)
class EnsembleWeights:
    ml: float
    at: float
    vat: float
    em: float

    def __post_init__(self):
        values = self.as_tuple()
        if any(not 0.0 <= a <= 1.0 for a in values):
            raise ContractError(f"ensemble weights must lie in [0, 1], got {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ContractError(f"ensemble weights must sum to 1, got {sum(values)}")

    def as_tuple(self):
        return (self.ml, self.at, self.vat, self.em)


def _member_list(prob_sets):
    if isinstance(prob_sets, dict):
        prob_sets = [prob_sets[name] for name in ENSEMBLE_MEMBERS]
    prob_sets = [np.asarray(p, dtype=np.float64) for p in prob_sets]
    if len(prob_sets) != len(ENSEMBLE_MEMBERS):
        raise ContractError(f"expected {len(ENSEMBLE_MEMBERS)} probability sets, got {len(prob_sets)}")
    shapes = {p.shape for p in prob_sets}
    if len(shapes) != 1:
        raise ContractError(f"probability sets disagree in shape: {sorted(shapes)}")
    return prob_sets


def ensemble_interpolate(prob_sets, weights):
    """p_I = α_ML p_ML + α_AT p_AT + α_VAT p_VAT + α_EM p_EM"""
    members = _member_list(prob_sets)
    out = np.zeros_like(members[0])
    for alpha, probs in zip(weights.as_tuple(), members):
        out = out + alpha * probs
    return out


def simplex_lattice(steps, parts=len(ENSEMBLE_MEMBERS)):
    """Integer compositions of ``steps`` into ``parts`` non-negative terms, lexicographic"""
    for head in itertools.product(range(steps + 1), repeat=parts - 1):
        rest = steps - sum(head)
        if rest >= 0:
            yield head + (rest,)


class GridSearchResult(NamedTuple):
    weights: EnsembleWeights
    error: float
    candidates: int


def grid_search_weights(prob_sets, labels, grid_step=config.GRID_STEP):
    """Lowest-error weights on the simplex lattice of resolution ``grid_step``.

    Only a strictly lower error displaces the incumbent, so ties keep the
    lexicographically smallest weights.
    """
    steps = int(round(1.0 / grid_step))
    if steps < 1 or abs(steps * grid_step - 1.0) > 1e-9:
        raise ConfigurationError("grid_step", f"{grid_step} does not divide 1 evenly")
    members = _member_list(prob_sets)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (members[0].shape[0],):
        raise ContractError("labels do not match the probability sets")
    best, best_error, count = None, None, 0
    for point in sorted(simplex_lattice(steps)):
        weights = EnsembleWeights(*(p / steps for p in point))
        error = float(np.mean(np.argmax(ensemble_interpolate(members, weights), axis=1) != labels))
        count += 1
        if best_error is None or error < best_error:
            best, best_error = weights, error
    logger.info("Grid search over %d weight vectors: best error %.4f", count, best_error)
    return GridSearchResult(best, best_error, count)


def exclusive_wins(prob_sets, labels):
    """Per model, indices of the examples that it alone classifies correctly"""
    labels = np.asarray(labels, dtype=np.int64)
    correct = {name: np.argmax(np.asarray(probs), axis=1) == labels for name, probs in prob_sets.items()}
    if not correct:
        return {}
    votes = np.sum(list(correct.values()), axis=0)
    return {name: np.flatnonzero(hits & (votes == 1)).tolist() for name, hits in correct.items()}


# =============================================================================
# Sweeps
# =============================================================================

def thread_cap():
    """Sweep parallelism from MIXEDOBJ_THREADS (default 1)"""
    raw = os.environ.get(config.THREADS_ENV_VAR)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(config.THREADS_ENV_VAR, f"'{raw}' is not an integer") from None
    if value < 1:
        raise ConfigurationError(config.THREADS_ENV_VAR, f"must be >= 1, got {value}")
    return value


def curve_runner(settings, base, runner, workers=None):
    """Run ``runner(base, setting, index)`` for every setting and tabulate the results.

    Each runner call must be independent (its own seed stream); rows come back
    in setting order whatever the parallelism. ``runner`` returns a dict with
    at least an ``error`` entry.
    """
    settings = [dict(s) for s in settings]
    if not settings:
        return pd.DataFrame(columns=["setting", "error"])
    cap = thread_cap()
    if workers is not None and workers < 1:
        raise ConfigurationError("workers", f"must be >= 1, got {workers}")
    workers = min(cap if workers is None else min(workers, cap), len(settings))
    logger.info("Running sweep of %d settings on %d worker(s)", len(settings), workers)

    def run(index):
        result = runner(base, settings[index], index)
        return {"setting": index, **settings[index], **result}

    if workers == 1:
        rows = [run(i) for i in range(len(settings))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, range(len(settings))))
    return pd.DataFrame(rows)


def write_sweep(frame, directory):
    """Write the sweep table as CSV and as a spreadsheet; returns both paths"""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, config.SWEEP_CSV_NAME)
    xlsx_path = os.path.join(directory, config.SWEEP_XLSX_NAME)
    logger.info("Saving sweep table: %s", csv_path)
    frame.to_csv(csv_path, index=False)
    logger.info("Saving sweep table: %s", xlsx_path)
    with pd.ExcelWriter(xlsx_path, engine="openpyxl") as writer:
        frame.to_excel(writer, index=False, sheet_name="sweep")
        worksheet = writer.sheets["sweep"]
        for idx, _ in enumerate(frame.columns):
            worksheet.column_dimensions[get_column_letter(idx + 1)].width = 15
    return csv_path, xlsx_path

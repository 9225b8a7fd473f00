"""
Text preprocessing, labeled/unlabeled dataset files and synthetic datasets.

File formats (UTF-8, '\\n' line endings):
    labeled:    label<TAB>text      (labels are 0-based integers)
    unlabeled:  text                (one document per line)
"""

import logging
import os
import unicodedata
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ContractError, EmptyDocumentError, LabelRangeError, ParseError
from numeric_core import make_rng

logger = logging.getLogger(__name__)

# ASCII symbols treated as punctuation on top of the Unicode P* categories
EXTRA_PUNCTUATION = frozenset("$+<=>^`|~")

SPLITS = ("train", "dev", "test")


def is_punctuation(char):
    return char in EXTRA_PUNCTUATION or unicodedata.category(char).startswith("P")


def preprocess(raw):
    """Lowercase ``raw`` and split it into tokens; every punctuation mark is its own token"""
    tokens = []
    current = []
    for char in raw.lower():
        if char.isspace():
            if current:
                tokens.append("".join(current))
                current = []
        elif is_punctuation(char):
            if current:
                tokens.append("".join(current))
                current = []
            tokens.append(char)
        else:
            current.append(char)
    if current:
        tokens.append("".join(current))
    if not tokens:
        raise EmptyDocumentError("document has no tokens")
    return tokens


def tokenize_whitespace(raw):
    """Plain whitespace split with case kept (the no-preprocessing variant)"""
    tokens = raw.split()
    if not tokens:
        raise EmptyDocumentError("document has no tokens")
    return tokens


def tokenizer_for(preprocess_text):
    return preprocess if preprocess_text else tokenize_whitespace


@dataclass(frozen=True)
class Example:
    tokens: Tuple[str, ...]
    label: Optional[int] = None

    def __post_init__(self):
        if not self.tokens:
            raise EmptyDocumentError("example has no tokens")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Dataset:
    labeled: Tuple[Example, ...]
    unlabeled: Tuple[Example, ...]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ContractError(f"class count must be positive, got {self.num_classes}")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split '{self.split}'")
        for example in self.labeled:
            if example.label is None or not 0 <= example.label < self.num_classes:
                raise LabelRangeError(f"label {example.label} outside [0, {self.num_classes})")
        for example in self.unlabeled:
            if example.label is not None:
                raise ContractError("unlabeled examples must not carry a label")

    @property
    def num_labeled(self):
        return len(self.labeled)

    @property
    def num_unlabeled(self):
        return len(self.unlabeled)

    def labels(self):
        return np.array([example.label for example in self.labeled], dtype=np.int64)

    def with_split(self, split):
        return Dataset(self.labeled, self.unlabeled, self.num_classes, split)


def _read_lines(path):
    with open(path, "r", encoding="utf-8", newline="\n") as handle:
        return handle.read().split("\n")


def load_dataset(labeled_path, unlabeled_path=None, num_classes=2, split="train", preprocess_text=True):
    """Parse a labeled TSV file and an optional unlabeled text file"""
    tokenize = tokenizer_for(preprocess_text)
    logger.info("Reading labeled file: %s", labeled_path)
    labeled = []
    lines = _read_lines(labeled_path)
    for number, line in enumerate(lines, start=1):
        if line == "" and number == len(lines):
            break
        label_text, sep, text = line.partition("\t")
        if not sep:
            raise ParseError("expected 'label<TAB>text'", labeled_path, number)
        try:
            label = int(label_text)
        except ValueError:
            raise ParseError(f"label '{label_text}' is not an integer", labeled_path, number) from None
        if label < 0:
            raise ParseError(f"label {label} is negative", labeled_path, number)
        if label >= num_classes:
            raise LabelRangeError(f"label {label} not below K={num_classes}", labeled_path, number)
        try:
            tokens = tokenize(text)
        except EmptyDocumentError:
            raise ParseError("empty document", labeled_path, number) from None
        labeled.append(Example(tuple(tokens), label))

    unlabeled = []
    if unlabeled_path is not None:
        unlabeled = load_unlabeled(unlabeled_path, preprocess_text)

    logger.info("Loaded %s split: %d labeled, %d unlabeled", split, len(labeled), len(unlabeled))
    return Dataset(tuple(labeled), tuple(unlabeled), num_classes, split)


def load_unlabeled(path, preprocess_text=True):
    tokenize = tokenizer_for(preprocess_text)
    logger.info("Reading unlabeled file: %s", path)
    examples = []
    lines = _read_lines(path)
    for number, line in enumerate(lines, start=1):
        if line == "" and number == len(lines):
            break
        try:
            examples.append(Example(tuple(tokenize(line))))
        except EmptyDocumentError:
            raise ParseError("empty document", path, number) from None
    return examples


def save_dataset(dataset, labeled_path, unlabeled_path=None):
    """Write ``dataset`` in the formats ``load_dataset`` reads.

    Tokens are joined by single spaces, which preprocessing splits back into
    the same tokens.
    """
    logger.info("Writing labeled file: %s", labeled_path)
    with open(labeled_path, "w", encoding="utf-8", newline="\n") as handle:
        for example in dataset.labeled:
            handle.write(f"{example.label}\t{' '.join(example.tokens)}\n")
    if unlabeled_path is not None and dataset.unlabeled:
        logger.info("Writing unlabeled file: %s", unlabeled_path)
        with open(unlabeled_path, "w", encoding="utf-8", newline="\n") as handle:
            for example in dataset.unlabeled:
                handle.write(" ".join(example.tokens) + "\n")


def holdout_split(dataset, fraction, rng):
    """Move a seeded ``fraction`` of the labeled examples into a dev split.

    Returns (train, dev); at least one labeled example stays in train.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"holdout fraction must be in (0, 1), got {fraction}")
    count = dataset.num_labeled
    held = max(0, min(int(round(count * fraction)), count - 1))
    order = rng.permutation(count)
    dev_idx = set(order[:held].tolist())
    train = tuple(ex for i, ex in enumerate(dataset.labeled) if i not in dev_idx)
    dev = tuple(ex for i, ex in enumerate(dataset.labeled) if i in dev_idx)
    return (Dataset(train, dataset.unlabeled, dataset.num_classes, dataset.split),
            Dataset(dev, (), dataset.num_classes, "dev"))


# =============================================================================
# Synthetic data
# =============================================================================

def synthetic_word(index):
    return f"w{index:05d}"


def indicator_count(vocab_size, num_classes):
    return max(1, vocab_size // (2 * num_classes))


def generate_synthetic(seed, num_labeled, num_unlabeled, num_classes, vocab_size,
                       len_range=(10, 30), signal_strength=0.9, split="train"):
    """Desk-scale stand-in for a labeled + unlabeled text corpus.

    Class k owns a disjoint block of indicator words. Each token of a class-k
    document is drawn from those indicators with probability
    ``signal_strength``, otherwise uniformly from the words no class owns.
    Indicator blocks depend only on (vocab_size, K), so splits drawn with
    different ``split`` tags share them.
    """
    if num_classes < 2:
        raise ContractError(f"synthetic data needs K >= 2, got {num_classes}")
    if vocab_size < 2 * num_classes:
        raise ContractError(f"vocab_size {vocab_size} below 2K = {2 * num_classes}")
    if not 0.5 < signal_strength <= 1.0:
        raise ContractError(f"signal_strength must be in (0.5, 1], got {signal_strength}")
    low, high = len_range
    if not 1 <= low <= high:
        raise ContractError(f"invalid length range {len_range}")
    if num_labeled < 0 or num_unlabeled < 0:
        raise ContractError("example counts must be non-negative")

    rng = make_rng(seed, "synthetic", split)
    per_class = indicator_count(vocab_size, num_classes)
    shared_start = per_class * num_classes

    def draw(label):
        length = int(rng.integers(low, high + 1))
        from_indicator = rng.random(length) < signal_strength
        indicator = label * per_class + rng.integers(0, per_class, size=length)
        shared = rng.integers(shared_start, vocab_size, size=length)
        ids = np.where(from_indicator, indicator, shared)
        return tuple(synthetic_word(int(i)) for i in ids)

    labeled = []
    for _ in range(num_labeled):
        label = int(rng.integers(0, num_classes))
        labeled.append(Example(draw(label), label))
    unlabeled = []
    for _ in range(num_unlabeled):
        label = int(rng.integers(0, num_classes))
        unlabeled.append(Example(draw(label)))
    return Dataset(tuple(labeled), tuple(unlabeled), num_classes, split)


def dataset_paths(directory, split):
    """Conventional file names used by the synth command"""
    return (os.path.join(directory, f"{split}.tsv"),
            os.path.join(directory, f"{split}.unlabeled.txt"))

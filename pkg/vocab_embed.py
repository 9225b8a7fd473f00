"""
Vocabulary construction, word2vec-format embedding files, lookup and word dropout.
"""

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from errors import ContractError, FormatError, ParseError
from numeric_core import Tensor, gather_rows

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"
UNK_INDEX = 0
PAD_INDEX = 1

EMBED_MODES = ("finetune", "static", "random")


@dataclass
class Vocabulary:
    """Frequency-ranked word index; index 0 is UNK and index 1 is PAD"""

    itos: List[str]
    frequencies: List[int]
    max_size: int
    stoi: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {word: i for i, word in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def index(self, word):
        return self.stoi.get(word, UNK_INDEX)

    def indices(self, tokens):
        return [self.stoi.get(token, UNK_INDEX) for token in tokens]

    def hash(self):
        digest = hashlib.sha256()
        for word in self.itos:
            digest.update(word.encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()


def build_vocabulary(examples, max_size):
    """Keep the ``max_size`` most frequent words; ties go to the lexicographically smaller word"""
    if max_size < 1:
        raise ContractError(f"max_size must be >= 1, got {max_size}")
    examples = list(examples)
    if not examples:
        raise ContractError("cannot build a vocabulary from zero examples")
    counts = Counter()
    for example in examples:
        counts.update(example.tokens)
    for reserved in (UNK_TOKEN, PAD_TOKEN):
        counts.pop(reserved, None)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:max_size]
    itos = [UNK_TOKEN, PAD_TOKEN] + [word for word, _ in ranked]
    frequencies = [0, 0] + [count for _, count in ranked]
    logger.info("Built vocabulary: %d words kept of %d distinct", len(ranked), len(counts))
    return Vocabulary(itos, frequencies, max_size)


def dump_vocabulary(vocab, path):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for i, (word, freq) in enumerate(zip(vocab.itos, vocab.frequencies)):
            handle.write(f"{i}\t{word}\t{freq}\n")


def load_vocabulary(path, max_size=None):
    itos, frequencies = [], []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected 'index<TAB>word<TAB>frequency'", path, number)
            try:
                index, freq = int(parts[0]), int(parts[2])
            except ValueError:
                raise ParseError("index and frequency must be integers", path, number) from None
            if index != len(itos):
                raise FormatError(f"index {index} out of sequence", path, number)
            itos.append(parts[1])
            frequencies.append(freq)
    if itos[:2] != [UNK_TOKEN, PAD_TOKEN]:
        raise FormatError("first two entries must be the reserved UNK and PAD words", path)
    return Vocabulary(itos, frequencies, max_size or len(itos) - 2)


# =============================================================================
# Embeddings
# =============================================================================

class EmbeddingMatrix:
    """vocab-size x d lookup table; trainable only when ``finetune`` is set"""

    def __init__(self, matrix, finetune=True):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] < 1:
            raise ContractError(f"embedding matrix must be 2-D with d > 0, got {matrix.shape}")
        self.finetune = bool(finetune)
        self.weight = Tensor(matrix, requires_grad=self.finetune, name="embedding")

    @property
    def dim(self):
        return self.weight.shape[1]

    @property
    def num_rows(self):
        return self.weight.shape[0]

    def row(self, index):
        return self.weight.data[index]

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.weight.data).tobytes()).hexdigest()

    def detached(self):
        clone = EmbeddingMatrix.__new__(EmbeddingMatrix)
        clone.finetune = False
        clone.weight = self.weight.detach()
        return clone


def _init_bound(dim):
    return 0.1 / math.sqrt(dim)


def random_embeddings(vocab, dim, rng, finetune=True):
    """Uniform in ±0.1/sqrt(d) for every row; the PAD row is zero"""
    bound = _init_bound(dim)
    matrix = rng.uniform(-bound, bound, size=(len(vocab), dim))
    matrix[PAD_INDEX] = 0.0
    return EmbeddingMatrix(matrix, finetune=finetune)


def load_pretrained(path, vocab, rng, expected_dim=None, finetune=True):
    """Initialize an embedding matrix from a word2vec text file.

    Rows for vocabulary words present in the file are copied verbatim, all
    other rows (UNK included) are drawn uniformly in ±0.1/sqrt(d) and the PAD
    row is zero. No row normalization is applied.
    """
    logger.info("Reading pretrained embeddings: %s", path)
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise FormatError("header must be 'count dim'", path, 1)
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("header fields must be integers", path, 1) from None
        if expected_dim is not None and dim != expected_dim:
            raise FormatError(f"dimension {dim} differs from expected {expected_dim}", path, 1)
        if dim < 1:
            raise FormatError(f"dimension must be positive, got {dim}", path, 1)

        bound = _init_bound(dim)
        matrix = rng.uniform(-bound, bound, size=(len(vocab), dim))
        found = 0
        for number, line in enumerate(handle, start=2):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise FormatError(f"expected {dim} values, found {len(parts) - 1}", path, number)
            word = parts[0]
            index = vocab.stoi.get(word)
            if index is None or index == PAD_INDEX:
                continue
            try:
                matrix[index] = [float(value) for value in parts[1:]]
            except ValueError:
                raise ParseError("malformed float", path, number) from None
            found += 1
    matrix[PAD_INDEX] = 0.0
    missing = len(vocab) - 2 - found
    if missing > 0:
        logger.warning("%d of %d vocabulary words missing from %s; randomly initialized",
                       missing, len(vocab) - 2, path)
    logger.info("Copied %d pretrained rows (file header lists %d words, d=%d)", found, count, dim)
    return EmbeddingMatrix(matrix, finetune=finetune)


def save_word2vec(path, vocab, embedding):
    """Write rows in word2vec text format with 17 significant digits"""
    matrix = embedding.weight.data
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"{len(vocab)} {matrix.shape[1]}\n")
        for word, row in zip(vocab.itos, matrix):
            handle.write(word + " " + " ".join(f"{value:.17g}" for value in row) + "\n")


def apply_word_dropout(tokens, p_w, rng):
    """Replace each token by UNK independently with probability ``p_w``"""
    if not 0.0 <= p_w < 1.0:
        raise ContractError(f"word dropout probability must be in [0, 1), got {p_w}")
    tokens = list(tokens)
    if p_w == 0.0:
        return tokens
    drop = rng.random(len(tokens)) < p_w
    return [UNK_TOKEN if d else token for token, d in zip(tokens, drop)]


def lookup(tokens, vocab, embedding):
    """T x d tensor of embedding rows; out-of-vocabulary words read the UNK row"""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("lookup needs at least one token")
    return gather_rows(embedding.weight, vocab.indices(tokens))


def lookup_indices(ids, embedding):
    """Embedding rows for an integer index array of any shape"""
    return gather_rows(embedding.weight, ids)

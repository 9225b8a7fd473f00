import os
import sys
import pytest
import numpy as np
import tempfile
import shutil

# Add the parent directory to sys.path to allow importing the application modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from classifier_model import ModelConfig, init_model, make_batch
from corpus import Dataset, Example, generate_synthetic
from numeric_core import make_rng
from vocab_embed import build_vocabulary, random_embeddings


@pytest.fixture(scope="session")
def temp_test_directory():
    """Creates a temporary directory for test files"""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    # Clean up after all tests
    shutil.rmtree(temp_dir)


@pytest.fixture(scope="session")
def sample_documents():
    """Small labeled and unlabeled corpora over a handful of words"""
    labeled = [
        Example(("good", "movie", "great"), 0),
        Example(("bad", "plot", "awful", "movie"), 1),
        Example(("great", "fun"), 2),
        Example(("awful", "bad", "boring", "plot", "movie"), 1),
    ]
    unlabeled = [
        Example(("fun", "movie")),
        Example(("boring", "plot", "good")),
        Example(("great", "great", "bad", "movie", "fun", "plot")),
    ]
    return Dataset(tuple(labeled), tuple(unlabeled), 3)


@pytest.fixture
def tiny_model(sample_documents):
    """d=4, hidden=8 per direction, K=3 model with a finetuned random embedding"""
    vocab = build_vocabulary(list(sample_documents.labeled) + list(sample_documents.unlabeled), 50)
    embedding = random_embeddings(vocab, 4, make_rng(7, "embedding"))
    params = init_model(ModelConfig(embed_dim=4, hidden_size=8, num_classes=3), embedding, make_rng(7, "init"))
    return vocab, params


@pytest.fixture
def tiny_batches(sample_documents, tiny_model):
    """Padded labeled and unlabeled batches for the tiny model"""
    vocab, _ = tiny_model
    labeled = make_batch([ex.tokens for ex in sample_documents.labeled], vocab,
                         [ex.label for ex in sample_documents.labeled])
    unlabeled = make_batch([ex.tokens for ex in sample_documents.unlabeled], vocab)
    return labeled, unlabeled


@pytest.fixture(scope="session")
def synthetic_dataset():
    """Seeded two-class synthetic dataset with unlabeled text"""
    return generate_synthetic(3, num_labeled=40, num_unlabeled=30, num_classes=2, vocab_size=40,
                              len_range=(3, 8), signal_strength=0.9)


@pytest.fixture
def write_text_file():
    """Fixture that writes text to a file and returns its path"""
    def _write_text_file(path, text):
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        return path
    return _write_text_file


@pytest.fixture
def rng():
    return np.random.default_rng(0)

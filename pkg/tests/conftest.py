"""Shared synthetic-data builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from puvdet.corpus import CodeSample
from puvdet.embed import EmbeddingMatrix


def make_cluster_data(n_pos=100, n_neg=100, dim=8, separation=10.0, seed=0,
                      scale=1.0):
    """Two gaussian clusters with known classes.

    Returns (samples, matrix): one CodeSample per point (truth set, nothing
    selected) and an EmbeddingMatrix of the raw vectors. The positive
    cluster sits at the origin, the negative one `separation` standard
    deviations away along every axis direction (L2 distance
    separation * scale).
    """
    rng = np.random.default_rng(seed)
    offset = separation * scale / np.sqrt(dim)
    pos = rng.normal(0.0, scale, size=(n_pos, dim))
    neg = rng.normal(offset, scale, size=(n_neg, dim))
    ids = [f"p{k:04d}" for k in range(n_pos)] + [f"n{k:04d}" for k in range(n_neg)]
    truths = [1] * n_pos + [0] * n_neg
    samples = [CodeSample(id=i, code=f"// point {i}", truth=t)
               for i, t in zip(ids, truths)]
    matrix = EmbeddingMatrix(tuple(ids), np.vstack([pos, neg]).astype(np.float32))
    return samples, matrix


def vocab_code(rng, vocab, length=30):
    return " ".join(vocab[rng.integers(0, len(vocab))] for _ in range(length))


def make_token_corpus(n_pos=60, n_neg=60, seed=0, overlap=0):
    """Corpus whose token distributions separate the two classes.

    overlap adds shared tokens to both vocabularies, blurring the clusters.
    """
    rng = np.random.default_rng(seed)
    shared = [f"common{k}" for k in range(overlap)]
    vocab_pos = [f"alpha{k}" for k in range(20)] + shared
    vocab_neg = [f"beta{k}" for k in range(20)] + shared
    samples = []
    for k in range(n_pos):
        samples.append(CodeSample(id=f"p{k:04d}", code=vocab_code(rng, vocab_pos), truth=1))
    for k in range(n_neg):
        samples.append(CodeSample(id=f"n{k:04d}", code=vocab_code(rng, vocab_neg), truth=0))
    return samples


@pytest.fixture
def cluster_data():
    return make_cluster_data()

"""Shared builders for synthetic corpora and embedding stores."""

from __future__ import annotations

import numpy as np
import pytest

from udgenre.corpus import Corpus, GenreLabel, Sentence, Treebank
from udgenre.features import EmbeddingStore


def make_sentence(sent_id: str, text: str | None = None,
                  comments: tuple = ()) -> Sentence:
    text = text or f"sentence {sent_id} body"
    tokens = tuple(text.split())
    base = (("sent_id", sent_id), ("text", text))
    return Sentence(sent_id=sent_id, text=text, tokens=tokens,
                    comments=base + tuple(comments))


def make_treebank(tb_id: str, genres: list[str],
                  n_train: int = 0, n_dev: int = 0, n_test: int = 0) -> Treebank:
    splits = {}
    for name, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        splits[name] = [make_sentence(f"{tb_id}-{name}-{i:04d}") for i in range(n)]
    return Treebank(tb_id=tb_id, language="xx", splits=splits,
                    metadata_genres=tuple(GenreLabel(g) for g in genres))


def make_corpus(spec: list[tuple[str, list[str], dict[str, int]]]) -> Corpus:
    """spec: list of (tb_id, genre names, {"train": n, "dev": n, "test": n})."""
    return Corpus(treebanks=[
        make_treebank(tb_id, genres, sizes.get("train", 0),
                      sizes.get("dev", 0), sizes.get("test", 0))
        for tb_id, genres, sizes in spec
    ])


def store_from_rows(refs: list[tuple[str, str]], rows: np.ndarray) -> EmbeddingStore:
    return EmbeddingStore(dim=rows.shape[1],
                          rows=np.asarray(rows, dtype=np.float32),
                          index=list(refs))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)

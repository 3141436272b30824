"""Character n-gram features and the sentence-embedding interchange format."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import SentRef

#: Sentences longer than this are truncated for featurization only.
TRUNCATION_CAP = 10_000

_MAGIC = b"EMB1"


class FeatureError(Exception):
    pass


class EmbeddingFormatError(Exception):
    pass


def clip_text(text: str, cap: int = TRUNCATION_CAP) -> str:
    return text if len(text) <= cap else text[:cap]


# ---------------------------------------------------------------------------
# Character n-gram bags

@dataclass
class Vocabulary:
    """Retained n-grams in lexicographic order with their document frequencies."""

    entries: list[str]
    df: list[int]
    n_min: int
    n_max: int

    def __post_init__(self) -> None:
        if len(self.entries) != len(self.df):
            raise FeatureError("vocabulary entries and df lengths differ")
        self.index = {gram: i for i, gram in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, gram: str) -> bool:
        return gram in self.index


@dataclass
class FeatureMatrix:
    """Per-text n-gram occurrence counts over a fixed vocabulary."""

    rows: sparse.csr_matrix
    vocab: Vocabulary

    def __post_init__(self) -> None:
        if self.rows.shape[1] != len(self.vocab):
            raise FeatureError("feature matrix width does not match vocabulary size")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


def _text_ngram_counts(text: str, n_min: int, n_max: int) -> Counter:
    text = clip_text(text)
    counts: Counter = Counter()
    length = len(text)
    for n in range(n_min, n_max + 1):
        for i in range(length - n + 1):
            counts[text[i:i + n]] += 1
    return counts


def char_ngram_features(texts: Sequence[str], n_min: int = 3, n_max: int = 6,
                        min_df: int = 2, max_df_frac: float = 0.30,
                        ) -> tuple[Vocabulary, FeatureMatrix]:
    """Bag-of-character-n-grams over raw text (spaces kept, case kept).

    An n-gram is retained iff it occurs in at least min_df and at most
    floor(max_df_frac * len(texts)) distinct texts. Column order is
    lexicographic by n-gram, so equal inputs give equal matrices.
    """
    if not texts:
        raise FeatureError("char_ngram_features requires at least one text")
    if n_min > n_max or n_min < 1:
        raise FeatureError(f"bad n-gram range [{n_min}, {n_max}]")

    per_text = [_text_ngram_counts(t, n_min, n_max) for t in texts]
    df_counts: Counter = Counter()
    for counts in per_text:
        df_counts.update(counts.keys())

    # small epsilon so an exact-integer product is not floored down by float error
    max_df = math.floor(max_df_frac * len(texts) + 1e-9)
    entries = sorted(g for g, d in df_counts.items() if min_df <= d <= max_df)
    if not entries:
        raise FeatureError(
            f"empty vocabulary: no n-gram has document frequency in "
            f"[{min_df}, {max_df}] over {len(texts)} texts")
    vocab = Vocabulary(entries=entries, df=[df_counts[g] for g in entries],
                       n_min=n_min, n_max=n_max)

    data: list[int] = []
    indices: list[int] = []
    indptr = [0]
    for counts in per_text:
        cols = sorted(vocab.index[g] for g in counts if g in vocab.index)
        indices.extend(cols)
        data.extend(counts[vocab.entries[c]] for c in cols)
        indptr.append(len(indices))
    rows = sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int32),
         np.asarray(indptr, dtype=np.int32)),
        shape=(len(texts), len(vocab)))
    return vocab, FeatureMatrix(rows=rows, vocab=vocab)


def vectorize(vocab: Vocabulary, texts: Sequence[str]) -> FeatureMatrix:
    """Count rows for new texts over an existing vocabulary."""
    data: list[int] = []
    indices: list[int] = []
    indptr = [0]
    for text in texts:
        counts = _text_ngram_counts(text, vocab.n_min, vocab.n_max)
        cols = sorted(vocab.index[g] for g in counts if g in vocab.index)
        indices.extend(cols)
        data.extend(counts[vocab.entries[c]] for c in cols)
        indptr.append(len(indices))
    rows = sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int32),
         np.asarray(indptr, dtype=np.int32)),
        shape=(len(texts), len(vocab)))
    return FeatureMatrix(rows=rows, vocab=vocab)


# ---------------------------------------------------------------------------
# Embedding store

@dataclass
class EmbeddingStore:
    """Dense float32 sentence vectors addressed by (treebank id, sent_id)."""

    dim: int
    rows: np.ndarray
    index: list[SentRef]

    def __post_init__(self) -> None:
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[1] != self.dim:
            raise EmbeddingFormatError(
                f"rows have shape {self.rows.shape}, expected (*, {self.dim})")
        if self.rows.shape[0] != len(self.index):
            raise EmbeddingFormatError(
                f"store has {self.rows.shape[0]} rows but {len(self.index)} index keys")
        if len(set(self.index)) != len(self.index):
            raise EmbeddingFormatError("duplicate keys in embedding index")
        if self.rows.size and not np.all(np.isfinite(self.rows)):
            bad = int(np.argwhere(~np.isfinite(self.rows).all(axis=1))[0][0])
            raise EmbeddingFormatError(f"non-finite embedding value at row {bad}")
        self._pos = {ref: i for i, ref in enumerate(self.index)}

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, ref: SentRef) -> bool:
        return tuple(ref) in self._pos

    def position(self, ref: SentRef) -> int:
        try:
            return self._pos[tuple(ref)]
        except KeyError:
            raise EmbeddingFormatError(f"no embedding for {ref!r}") from None

    def row_for(self, ref: SentRef) -> np.ndarray:
        return self.rows[self.position(ref)]

    def rows_for(self, refs: Iterable[SentRef]) -> np.ndarray:
        refs = list(refs)
        if not refs:
            return np.empty((0, self.dim), dtype=np.float32)
        return self.rows[[self.position(r) for r in refs]]

    def missing(self, refs: Iterable[SentRef]) -> list[SentRef]:
        return [r for r in refs if tuple(r) not in self._pos]


def write_embeddings(store: EmbeddingStore, data_path: str | Path,
                     index_path: str | Path) -> None:
    """Write the binary data file and its aligned text index.

    Data file layout (little-endian): 4-byte magic "EMB1", uint32 row count,
    uint32 dimension, then N*dim float32 values row-major. Index file: UTF-8,
    one "treebank_id<TAB>sent_id" line per row, same order.
    """
    data_path, index_path = Path(data_path), Path(index_path)
    try:
        with open(data_path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", len(store), store.dim))
            fh.write(np.ascontiguousarray(store.rows, dtype="<f4").tobytes())
        with open(index_path, "w", encoding="utf-8", newline="\n") as fh:
            for tb_id, sent_id in store.index:
                fh.write(f"{tb_id}\t{sent_id}\n")
    except OSError as exc:
        raise EmbeddingFormatError(f"cannot write embeddings: {exc}") from None


def read_embeddings(data_path: str | Path, index_path: str | Path) -> EmbeddingStore:
    data_path, index_path = Path(data_path), Path(index_path)
    try:
        blob = data_path.read_bytes()
    except OSError as exc:
        raise EmbeddingFormatError(f"cannot read {data_path}: {exc}") from None
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise EmbeddingFormatError(f"{data_path} is not an embedding file")
    n, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * n * dim
    if len(blob) != expected:
        raise EmbeddingFormatError(
            f"{data_path}: header promises {n} rows of dim {dim} "
            f"({expected} bytes), file has {len(blob)} bytes")
    rows = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=12)
    rows = rows.reshape(n, dim).copy()

    try:
        lines = index_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise EmbeddingFormatError(f"cannot read {index_path}: {exc}") from None
    if len(lines) != n:
        raise EmbeddingFormatError(
            f"{data_path} holds {n} rows but {index_path} has {len(lines)} index lines")
    index: list[SentRef] = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise EmbeddingFormatError(
                f"{index_path}:{lineno}: expected 'treebank_id<TAB>sent_id'")
        index.append((parts[0], parts[1]))
    return EmbeddingStore(dim=dim, rows=rows, index=index)


def centroid(store: EmbeddingStore, member_rows: Iterable[int]) -> np.ndarray:
    """Componentwise mean of the selected rows, accumulated in float64.

    Members are visited in sorted deduplicated order, so the result is
    invariant to the iteration order of the input set.
    """
    members = sorted(set(int(i) for i in member_rows))
    if not members:
        raise FeatureError("empty cluster: centroid needs at least one member row")
    return np.mean(store.rows[members].astype(np.float64), axis=0)

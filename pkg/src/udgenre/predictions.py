"""Per-sentence genre predictions and their tab-separated file format."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import GENRE_INDEX, GENRES, N_GENRES, GenreLabel, SentRef


class PredictionError(Exception):
    pass


@dataclass
class PredictionSet:
    """Labels for a fixed set of sentences from one (method, seed) run.

    ``simplex`` optionally holds the full 18-way probability rows; ``scores``
    optionally overrides the per-row confidence written to disk.
    """

    method: str
    seed: int
    refs: list[SentRef]
    label_idx: np.ndarray
    simplex: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.label_idx = np.asarray(self.label_idx, dtype=np.int64)
        if self.label_idx.shape != (len(self.refs),):
            raise PredictionError("label count does not match refs")
        if self.label_idx.size and not (
                0 <= self.label_idx.min() and self.label_idx.max() < N_GENRES):
            raise PredictionError("label index outside the 18-genre universe")
        if len(set(self.refs)) != len(self.refs):
            raise PredictionError("duplicate sentence refs in prediction set")
        if self.simplex is not None:
            self.simplex = np.asarray(self.simplex, dtype=np.float64)
            if self.simplex.shape != (len(self.refs), N_GENRES):
                raise PredictionError("simplex shape does not match refs")
            if self.simplex.size and np.abs(self.simplex.sum(axis=1) - 1.0).max() > 1e-6:
                raise PredictionError("simplex rows do not sum to 1")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != (len(self.refs),):
                raise PredictionError("score count does not match refs")

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def labels(self) -> list[GenreLabel]:
        return [GENRES[i] for i in self.label_idx]

    def confidence(self) -> np.ndarray:
        if self.scores is not None:
            return self.scores
        if self.simplex is not None:
            return self.simplex[np.arange(len(self.refs)), self.label_idx]
        return np.ones(len(self.refs), dtype=np.float64)

    def as_dict(self) -> dict[SentRef, GenreLabel]:
        return {ref: GENRES[i] for ref, i in zip(self.refs, self.label_idx)}

    def covers(self, refs: Iterable[SentRef]) -> bool:
        return set(self.refs) == set(tuple(r) for r in refs)

    def to_tsv(self) -> str:
        conf = self.confidence()
        lines = [
            f"{self.method}\t{tb}\t{sid}\t{GENRES[i].value}\t{conf[row]:.6f}\t{self.seed}"
            for row, ((tb, sid), i) in enumerate(zip(self.refs, self.label_idx))
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_tsv(cls, text: str) -> "PredictionSet":
        refs: list[SentRef] = []
        idx: list[int] = []
        scores: list[float] = []
        method: str | None = None
        seed: int | None = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise PredictionError(f"line {lineno}: expected 6 fields, got {len(parts)}")
            m, tb, sid, genre, conf, s = parts
            if method is None:
                method, seed = m, int(s)
            elif m != method or int(s) != seed:
                raise PredictionError(
                    f"line {lineno}: mixed (method, seed) in one prediction file")
            try:
                idx.append(GENRE_INDEX[GenreLabel(genre)])
            except ValueError:
                raise PredictionError(f"line {lineno}: unknown genre {genre!r}") from None
            refs.append((tb, sid))
            scores.append(float(conf))
        if method is None:
            raise PredictionError("empty prediction file")
        return cls(method=method, seed=seed, refs=refs,
                   label_idx=np.asarray(idx), scores=np.asarray(scores))

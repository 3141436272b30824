"""Evaluation metrics: purity, agreement, distribution overlap error, micro-F1,
confusion matrices, and metadata-derived genre bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cluster import ClusterAssignment
from .corpus import GENRE_INDEX, GENRES, N_GENRES, Corpus, GenreLabel, SentRef
from .predictions import PredictionSet


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# Distributions and overlap

@dataclass
class GenreDistribution:
    """A probability assignment over the 18 labels (or k cluster ids)."""

    probs: np.ndarray
    empty: bool = False

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise EvalError("distribution must be a vector")
        if np.any(self.probs < 0):
            raise EvalError("invalid distribution: negative entry")
        total = self.probs.sum()
        if self.empty:
            if total != 0:
                raise EvalError("empty-flagged distribution has nonzero mass")
        elif abs(total - 1.0) > 1e-9:
            raise EvalError(f"invalid distribution: mass {total!r} != 1")

    @classmethod
    def uniform_over(cls, genres: Iterable[GenreLabel]) -> "GenreDistribution":
        idx = [GENRE_INDEX[g] for g in genres]
        if not idx:
            raise EvalError("uniform distribution over an empty label set")
        p = np.zeros(N_GENRES)
        p[idx] = 1.0 / len(idx)
        return cls(p)

    @classmethod
    def point_mass(cls, genre: GenreLabel) -> "GenreDistribution":
        p = np.zeros(N_GENRES)
        p[GENRE_INDEX[genre]] = 1.0
        return cls(p)

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "GenreDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total == 0:
            return cls(np.zeros_like(counts), empty=True)
        return cls(counts / total)


def bhattacharyya(p: GenreDistribution | np.ndarray,
                  q: GenreDistribution | np.ndarray) -> float:
    """Discrete Bhattacharyya coefficient sum_l sqrt(p_l * q_l)."""
    if not isinstance(p, GenreDistribution):
        p = GenreDistribution(p)
    if not isinstance(q, GenreDistribution):
        q = GenreDistribution(q)
    if p.probs.shape != q.probs.shape:
        raise EvalError("distributions have different support sizes")
    return float(np.sqrt(p.probs * q.probs).sum())


def expected_overlap(ls: Iterable[GenreLabel], lt: Iterable[GenreLabel]) -> float:
    """Bhattacharyya coefficient of two uniform metadata distributions:
    |intersection| / sqrt(|Ls| * |Lt|)."""
    ls, lt = set(ls), set(lt)
    if not ls or not lt:
        raise EvalError("expected_overlap requires non-empty label sets")
    return len(ls & lt) / math.sqrt(len(ls) * len(lt))


# ---------------------------------------------------------------------------
# Shared access to predicted indices

def _indices_by_ref(obj: PredictionSet | ClusterAssignment,
                    ) -> tuple[dict[SentRef, int], int]:
    if isinstance(obj, PredictionSet):
        return {r: int(i) for r, i in zip(obj.refs, obj.label_idx)}, N_GENRES
    if isinstance(obj, ClusterAssignment):
        return obj.as_dict(), obj.k
    raise EvalError(f"cannot evaluate object of type {type(obj).__name__}")


def _covered(mapping: dict[SentRef, int], refs: Sequence[SentRef],
             what: str) -> None:
    missing = [r for r in refs if r not in mapping]
    if missing:
        raise EvalError(f"{what}: {len(missing)} evaluation sentences have no "
                        f"prediction (e.g. {missing[0]!r})")


# ---------------------------------------------------------------------------
# Metrics

def delta_bc(obj: PredictionSet | ClusterAssignment, corpus: Corpus,
             refs: Sequence[SentRef]) -> float:
    """Mean absolute difference, over unordered treebank pairs, between the
    metadata-expected overlap and the Bhattacharyya coefficient of the
    empirical predicted distributions, scaled to [0, 100]."""
    mapping, dim = _indices_by_ref(obj)
    _covered(mapping, refs, "delta_bc")

    counts: dict[str, np.ndarray] = {}
    for ref in refs:
        counts.setdefault(ref[0], np.zeros(dim))[mapping[ref]] += 1
    eligible = sorted(counts)
    if len(eligible) < 2:
        raise EvalError("delta_bc: no pairs (fewer than 2 treebanks with "
                        "evaluation sentences)")
    dists = {tb: GenreDistribution.from_counts(counts[tb]) for tb in eligible}
    errors = []
    for s, t in combinations(eligible, 2):
        expected = expected_overlap(corpus.by_id(s).metadata_genres,
                                    corpus.by_id(t).metadata_genres)
        errors.append(abs(expected - bhattacharyya(dists[s], dists[t])))
    return 100.0 * float(np.mean(errors))


def purity(obj: PredictionSet | ClusterAssignment, corpus: Corpus,
           refs: Sequence[SentRef]) -> float | None:
    """Cluster purity over sentences of single-genre treebanks, with the
    treebank's sole genre as gold. None when no such sentences exist."""
    mapping, _ = _indices_by_ref(obj)
    single = [r for r in refs if corpus.by_id(r[0]).is_single_genre]
    if not single:
        return None
    _covered(mapping, single, "purity")
    groups: dict[int, dict[GenreLabel, int]] = {}
    for ref in single:
        gold = corpus.by_id(ref[0]).sole_genre
        by_gold = groups.setdefault(mapping[ref], {})
        by_gold[gold] = by_gold.get(gold, 0) + 1
    majority_mass = sum(max(by_gold.values()) for by_gold in groups.values())
    return 100.0 * majority_mass / len(single)


def _majority(indices: list[int]) -> int:
    counts = np.bincount(np.asarray(indices))
    return int(np.argmax(counts))  # ties toward the lower index


def agreement(obj: PredictionSet | ClusterAssignment, corpus: Corpus,
              refs: Sequence[SentRef]) -> float | None:
    """Fraction of unordered pairs of same-genre single-genre treebanks whose
    majority predicted labels coincide. None when no genre has two such
    treebanks with evaluation sentences."""
    mapping, _ = _indices_by_ref(obj)
    by_tb: dict[str, list[int]] = {}
    for ref in refs:
        tb = corpus.by_id(ref[0])
        if tb.is_single_genre:
            if ref not in mapping:
                raise EvalError(f"agreement: no prediction for {ref!r}")
            by_tb.setdefault(ref[0], []).append(mapping[ref])

    by_genre: dict[GenreLabel, list[str]] = {}
    for tb_id in sorted(by_tb):
        by_genre.setdefault(corpus.by_id(tb_id).sole_genre, []).append(tb_id)
    majorities = {tb_id: _majority(v) for tb_id, v in by_tb.items()}

    agree = total = 0
    for genre in sorted(by_genre, key=GENRE_INDEX.__getitem__):
        for s, t in combinations(by_genre[genre], 2):
            total += 1
            agree += majorities[s] == majorities[t]
    if total == 0:
        return None
    return 100.0 * agree / total


def micro_f1(predictions: PredictionSet, gold: Mapping[SentRef, GenreLabel],
             refs: Sequence[SentRef]) -> float | None:
    """Micro-averaged F1 over the gold-labeled evaluation sentences. None
    when no evaluation sentence has a gold label."""
    mapping, _ = _indices_by_ref(predictions)
    labeled = [r for r in refs if r in gold]
    if not labeled:
        return None
    _covered(mapping, labeled, "micro_f1")
    tp = np.zeros(N_GENRES)
    fp = np.zeros(N_GENRES)
    fn = np.zeros(N_GENRES)
    for ref in labeled:
        pred = mapping[ref]
        true = GENRE_INDEX[gold[ref]]
        if pred == true:
            tp[pred] += 1
        else:
            fp[pred] += 1
            fn[true] += 1
    denom_p = tp.sum() + fp.sum()
    denom_r = tp.sum() + fn.sum()
    precision = tp.sum() / denom_p if denom_p else 0.0
    recall = tp.sum() / denom_r if denom_r else 0.0
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def confusion(predictions: PredictionSet, gold: Mapping[SentRef, GenreLabel],
              refs: Sequence[SentRef]) -> np.ndarray:
    """Row-normalized 18 x 18 matrix of gold (rows) against predicted
    (columns); rows without gold mass stay zero."""
    mapping, _ = _indices_by_ref(predictions)
    labeled = [r for r in refs if r in gold]
    _covered(mapping, labeled, "confusion")
    counts = np.zeros((N_GENRES, N_GENRES))
    for ref in labeled:
        counts[GENRE_INDEX[gold[ref]], mapping[ref]] += 1
    totals = counts.sum(axis=1)
    out = np.zeros_like(counts)
    occupied = totals > 0
    out[occupied] = counts[occupied] / totals[occupied, None]
    return out


def confusion_csv(matrix: np.ndarray) -> str:
    header = "gold," + ",".join(g.value for g in GENRES)
    lines = [header]
    for i, g in enumerate(GENRES):
        lines.append(g.value + "," + ",".join(f"{v:.6f}" for v in matrix[i]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Metadata bounds

@dataclass
class GenreBounds:
    min_frac: np.ndarray
    uniform_frac: np.ndarray
    max_frac: np.ndarray
    treebank_count: np.ndarray

    def __post_init__(self) -> None:
        if not (np.all(self.min_frac <= self.uniform_frac + 1e-12)
                and np.all(self.uniform_frac <= self.max_frac + 1e-12)):
            raise EvalError("genre bounds must satisfy min <= uniform <= max")

    def to_csv(self) -> str:
        lines = ["genre,treebank_count,min_frac,uniform_frac,max_frac"]
        for i, g in enumerate(GENRES):
            lines.append(f"{g.value},{int(self.treebank_count[i])},"
                         f"{self.min_frac[i]:.6f},{self.uniform_frac[i]:.6f},"
                         f"{self.max_frac[i]:.6f}")
        return "\n".join(lines) + "\n"


def genre_bounds(corpus: Corpus) -> GenreBounds:
    """Per-genre sentence-mass bounds implied by treebank metadata alone:
    min counts only single-genre treebanks, max counts every treebank listing
    the genre, uniform splits each treebank's mass evenly over its labels."""
    total = corpus.total_sentences
    if total == 0:
        raise EvalError("genre_bounds: corpus has no sentences")
    mins = np.zeros(N_GENRES)
    unis = np.zeros(N_GENRES)
    maxs = np.zeros(N_GENRES)
    tb_count = np.zeros(N_GENRES, dtype=np.int64)
    for tb in corpus:
        n = tb.n_sentences
        for g in tb.metadata_genres:
            i = GENRE_INDEX[g]
            tb_count[i] += 1
            maxs[i] += n
            unis[i] += n / len(tb.metadata_genres)
            if tb.is_single_genre:
                mins[i] += n
    return GenreBounds(min_frac=mins / total, uniform_frac=unis / total,
                       max_frac=maxs / total, treebank_count=tb_count)


# ---------------------------------------------------------------------------
# Seed aggregation

@dataclass
class MetricReport:
    """Per-seed metric values with mean and population standard deviation.

    A metric that is not applicable is None for every seed and aggregates to
    explicit nulls rather than zeros.
    """

    method: str
    seeds: list[int]
    per_seed: dict[str, list[float | None]] = field(default_factory=dict)

    def add(self, metric: str, values: list[float | None]) -> None:
        if len(values) != len(self.seeds):
            raise EvalError(f"{metric}: {len(values)} values for "
                            f"{len(self.seeds)} seeds")
        self.per_seed[metric] = values

    def aggregate(self) -> dict[str, dict[str, float | None]]:
        out: dict[str, dict[str, float | None]] = {}
        for metric, values in self.per_seed.items():
            present = [v for v in values if v is not None]
            if not present:
                out[metric] = {"mean": None, "sd": None}
            elif len(present) != len(values):
                raise EvalError(f"{metric}: mixed null and numeric seed values")
            else:
                arr = np.asarray(present, dtype=np.float64)
                out[metric] = {"mean": float(arr.mean()),
                               "sd": float(arr.std(ddof=0))}
        return out

    def to_json_dict(self) -> dict:
        return {"method": self.method, "seeds": list(self.seeds),
                "per_seed": {m: list(v) for m, v in self.per_seed.items()},
                "aggregate": self.aggregate()}

"""Per-treebank clustering plus outward genre-label propagation (GMM+L, LDA+L)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .cluster import ClusterAssignment, gmm_assign, gmm_fit, lda_assign, lda_fit
from .corpus import GENRE_INDEX, Corpus, GenreLabel, SentRef, _stable_int
from .features import EmbeddingStore, FeatureError, char_ngram_features
from .predictions import PredictionSet


class PropagationError(Exception):
    pass


@dataclass
class TreebankClusters:
    """One treebank's |L_s| clusters with centroids in shared embedding space."""

    treebank: str
    k: int
    assignment: ClusterAssignment
    centroids: np.ndarray
    sizes: np.ndarray
    metadata_genres: tuple[GenreLabel, ...]
    labels: list[GenreLabel | None] = field(default_factory=list)
    label_scores: list[float] = field(default_factory=list)
    label_rounds: list[int | None] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.k != len(self.metadata_genres):
            raise PropagationError(
                f"treebank {self.treebank!r}: k={self.k} does not equal "
                f"|metadata_genres|={len(self.metadata_genres)}")
        if not self.labels:
            self.labels = [None] * self.k
            self.label_scores = [math.nan] * self.k
            self.label_rounds = [None] * self.k

    def set_label(self, cluster: int, genre: GenreLabel, score: float,
                  round_: int) -> None:
        if self.labels[cluster] is not None:
            raise PropagationError(
                f"cluster {cluster} of {self.treebank!r} already labeled")
        if genre not in self.metadata_genres:
            raise PropagationError(
                f"{genre.value!r} is not in {self.treebank!r} metadata genres")
        if genre in self.labels:
            raise PropagationError(
                f"{self.treebank!r} already has a cluster labeled {genre.value!r}")
        self.labels[cluster] = genre
        self.label_scores[cluster] = score
        self.label_rounds[cluster] = round_

    @property
    def assigned_genres(self) -> set[GenreLabel]:
        return {g for g in self.labels if g is not None}

    @property
    def fully_labeled(self) -> bool:
        return all(g is not None for g in self.labels)


def _derive_seed(seed: int, tb_id: str) -> list[int]:
    return [int(seed), _stable_int(tb_id)]


def cluster_all_treebanks(corpus: Corpus, method: str, embeddings: EmbeddingStore,
                          seed: int, restrict: set[SentRef] | None = None,
                          ngram_params: dict | None = None,
                          gmm_params: dict | None = None,
                          lda_params: dict | None = None) -> list[TreebankClusters]:
    """Cluster every treebank into |L_s| groups with the named method.

    ``method`` is "gmm" (over embeddings) or "lda" (over per-treebank
    character n-gram counts); centroids come from embeddings in both cases so
    all treebanks share one representational space. ``restrict`` optionally
    limits clustering to the given sentence refs. Degenerate treebanks
    (fewer in-scope sentences than k, or an empty n-gram vocabulary) place
    all sentences in cluster 0 and are flagged, not fatal.
    """
    if method not in ("gmm", "lda"):
        raise PropagationError(f"unknown clustering method {method!r}")
    ngram_params = ngram_params or {}
    gmm_params = gmm_params or {}
    lda_params = lda_params or {}

    out: list[TreebankClusters] = []
    for tb in corpus:
        refs = [r for r in tb.refs() if restrict is None or r in restrict]
        missing = embeddings.missing(refs)
        if missing:
            shown = ", ".join(f"{sid}" for _, sid in missing[:5])
            raise PropagationError(
                f"treebank {tb.tb_id!r}: {len(missing)} sentences lack "
                f"embeddings (e.g. {shown})")
        k = len(tb.metadata_genres)
        n = len(refs)
        flags: list[str] = []
        tb_seed = _derive_seed(seed, tb.tb_id)

        if n == 0:
            assignment = ClusterAssignment(scope=tb.tb_id, refs=[],
                                           labels=np.empty(0, dtype=np.int64), k=k)
            flags.append("no sentences in clustering scope")
        elif k == 1:
            assignment = ClusterAssignment(scope=tb.tb_id, refs=refs,
                                           labels=np.zeros(n, dtype=np.int64), k=1)
        elif n < k:
            assignment = ClusterAssignment(scope=tb.tb_id, refs=refs,
                                           labels=np.zeros(n, dtype=np.int64), k=k)
            flags.append(f"only {n} sentences for k={k}: all in cluster 0")
        elif method == "gmm":
            X = embeddings.rows_for(refs).astype(np.float64)
            model = gmm_fit(X, k=k, seed=tb_seed, **gmm_params)
            assignment = gmm_assign(model, X, refs=refs, scope=tb.tb_id)
        else:
            texts = [corpus.sentence(r).text for r in refs]
            try:
                _, feats = char_ngram_features(texts, **ngram_params)
            except FeatureError:
                assignment = ClusterAssignment(scope=tb.tb_id, refs=refs,
                                               labels=np.zeros(n, dtype=np.int64),
                                               k=k)
                flags.append("empty n-gram vocabulary: all in cluster 0")
            else:
                if k > len(feats.vocab):
                    assignment = ClusterAssignment(
                        scope=tb.tb_id, refs=refs,
                        labels=np.zeros(n, dtype=np.int64), k=k)
                    flags.append(f"vocabulary smaller than k={k}: all in cluster 0")
                else:
                    model = lda_fit(feats, k=k, seed=tb_seed, **lda_params)
                    assignment = lda_assign(model, feats, refs=refs, scope=tb.tb_id)
                    flags.extend(assignment.flags)

        sizes = np.bincount(assignment.labels, minlength=k).astype(np.int64)
        dim = embeddings.dim
        centroids = np.full((k, dim), np.nan, dtype=np.float64)
        rows = embeddings.rows_for(refs).astype(np.float64) if n else None
        for c in range(k):
            members = np.flatnonzero(assignment.labels == c)
            if members.size:
                centroids[c] = rows[members].mean(axis=0)
        out.append(TreebankClusters(treebank=tb.tb_id, k=k, assignment=assignment,
                                    centroids=centroids, sizes=sizes,
                                    metadata_genres=tb.metadata_genres,
                                    flags=flags))
    return out


# ---------------------------------------------------------------------------
# propagation

def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 2.0  # maximal cosine distance for undefined directions
    return 1.0 - float(a @ b) / (na * nb)


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


_METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "cosine": cosine_distance,
    "euclidean": euclidean_distance,
}


@dataclass
class PropagationResult:
    clusters: list[TreebankClusters]
    residue: list[dict]
    pool_history: list[dict[GenreLabel, int]]
    rounds: int

    def report_tsv(self) -> str:
        lines = []
        for tc in self.clusters:
            for c in range(tc.k):
                if tc.labels[c] is None:
                    continue
                lines.append(f"{tc.treebank}\t{c}\t{tc.labels[c].value}"
                             f"\t{tc.label_scores[c]:.6f}\t{tc.label_rounds[c]}")
        return "\n".join(lines) + ("\n" if lines else "")

    def residue_tsv(self) -> str:
        lines = []
        for entry in self.residue:
            genres = ",".join(g.value for g in entry["unassigned_genres"])
            lines.append(f"{entry['treebank']}\t{entry['cluster_index']}"
                         f"\t{entry['size']}\t{genres}")
        return "\n".join(lines) + ("\n" if lines else "")


def propagate_labels(clusters: list[TreebankClusters], rounds: int = 3,
                     metric: str = "cosine") -> PropagationResult:
    """Label clusters outward from single-genre treebanks.

    The pool starts with single-genre treebank centroids. Each round scores
    every (unlabeled cluster, poolable genre) pair by minimum distance to the
    pooled centroids of that genre, then assigns greedily in ascending
    (score, treebank, cluster, genre) order under the one-label-per-cluster
    and one-cluster-per-genre constraints; new clusters join the pool at
    round end. A final closure pass labels any treebank's last unlabeled
    cluster when exactly one metadata genre remains unassigned. Whatever is
    still unlabeled is returned as residue.
    """
    if metric not in _METRICS:
        raise PropagationError(f"unknown distance metric {metric!r}")
    dist = _METRICS[metric]

    pool: dict[GenreLabel, list[np.ndarray]] = {}
    for tc in clusters:
        if len(tc.metadata_genres) == 1:
            genre = tc.metadata_genres[0]
            if tc.labels[0] is None:
                tc.set_label(0, genre, score=0.0, round_=0)
            if tc.sizes[0] > 0:
                pool.setdefault(genre, []).append(tc.centroids[0])
    history = [{g: len(v) for g, v in pool.items()}]

    for round_ in range(1, rounds + 1):
        candidates = []
        for tc in clusters:
            if tc.fully_labeled:
                continue
            for genre in tc.metadata_genres:
                if genre in tc.assigned_genres or genre not in pool:
                    continue
                for c in range(tc.k):
                    if tc.labels[c] is not None or tc.sizes[c] == 0:
                        continue
                    score = min(dist(tc.centroids[c], p) for p in pool[genre])
                    candidates.append((score, tc.treebank, c,
                                       GENRE_INDEX[genre], tc, genre))
        candidates.sort(key=lambda t: t[:4])
        newly: list[tuple[TreebankClusters, int, GenreLabel]] = []
        for score, _, c, _, tc, genre in candidates:
            if tc.labels[c] is not None or genre in tc.assigned_genres:
                continue
            tc.set_label(c, genre, score=score, round_=round_)
            newly.append((tc, c, genre))
        for tc, c, genre in newly:
            if tc.sizes[c] > 0:
                pool.setdefault(genre, []).append(tc.centroids[c])
        history.append({g: len(v) for g, v in pool.items()})

    for tc in clusters:
        unlabeled = [c for c in range(tc.k) if tc.labels[c] is None]
        unassigned = [g for g in tc.metadata_genres if g not in tc.assigned_genres]
        if len(unlabeled) == 1 and len(unassigned) == 1:
            tc.set_label(unlabeled[0], unassigned[0], score=math.nan,
                         round_=rounds + 1)

    residue = []
    for tc in clusters:
        unassigned = [g for g in tc.metadata_genres if g not in tc.assigned_genres]
        for c in range(tc.k):
            if tc.labels[c] is None:
                residue.append({"treebank": tc.treebank, "cluster_index": c,
                                "size": int(tc.sizes[c]),
                                "unassigned_genres": unassigned})
    return PropagationResult(clusters=clusters, residue=residue,
                             pool_history=history, rounds=rounds)


def to_predictions(clusters: Iterable[TreebankClusters], method: str,
                   seed: int) -> PredictionSet:
    """Broadcast cluster labels to member sentences.

    Unlabeled clusters with members are an error; empty unlabeled clusters
    (possible residue from degenerate treebanks) have nothing to predict and
    are skipped.
    """
    refs: list[SentRef] = []
    idx: list[int] = []
    for tc in clusters:
        for c in range(tc.k):
            if tc.labels[c] is None and tc.sizes[c] > 0:
                raise PropagationError(
                    f"cluster {c} of {tc.treebank!r} is unlabeled but has "
                    f"{int(tc.sizes[c])} sentences")
        for ref, c in zip(tc.assignment.refs, tc.assignment.labels):
            refs.append(ref)
            idx.append(GENRE_INDEX[tc.labels[int(c)]])
    return PredictionSet(method=method, seed=seed, refs=refs,
                         label_idx=np.asarray(idx, dtype=np.int64))

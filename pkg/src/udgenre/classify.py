"""Weakly supervised classifiers over frozen embeddings: Class, Boot, Freq, Zero."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .corpus import (
    GENRE_INDEX,
    GENRES,
    N_GENRES,
    Corpus,
    GenreLabel,
    SentRef,
    SplitSpec,
)
from .features import EmbeddingStore
from .predictions import PredictionSet


class ClassifyError(Exception):
    pass


# ---------------------------------------------------------------------------
# Linear softmax probe

@dataclass
class ProbeHyper:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 3
    weight_decay: float = 0.01
    seed: int = 41


@dataclass
class ProbeModel:
    W: np.ndarray
    b: np.ndarray
    heldout_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ClassifyError("probe parameters are not finite")

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        logits = np.asarray(X, dtype=np.float64) @ self.W + self.b
        logp = logits - logsumexp(logits, axis=1, keepdims=True)
        return np.exp(logp)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def probe_loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray,
                        y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of the linear softmax and its exact gradients.

    Weight decay is not part of this loss; the optimizer applies it as a
    decoupled step, so these gradients are directly checkable by finite
    differences.
    """
    n = X.shape[0]
    logits = X @ W + b
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = float(-logp[np.arange(n), y].mean())
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, X.T @ G, G.sum(axis=0)


def probe_loss(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    logits = X @ W + b
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(-logp[np.arange(X.shape[0]), y].mean())


class _AdamW:
    """Adam with decoupled weight decay, applied to both parameters."""

    def __init__(self, shapes, lr, weight_decay, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps)
                            + self.wd * p)


def train_probe(X: np.ndarray, y: np.ndarray, X_held: np.ndarray,
                y_held: np.ndarray, hyper: ProbeHyper) -> ProbeModel:
    """Minibatch AdamW training with early stopping on heldout loss.

    Stops after `patience` consecutive epochs without strict heldout
    improvement and returns the best-heldout parameters. An empty heldout
    set disables early stopping (all epochs run, final parameters returned,
    trace left empty). max_epochs=0 returns the initialization.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ClassifyError("train_probe requires at least one example")
    if X.shape[0] != y.shape[0]:
        raise ClassifyError("X and y lengths differ")
    if len(set(y.tolist())) == 1:
        warnings.warn("probe training data contains a single label; the "
                      "classifier will be degenerate", stacklevel=2)

    rng = np.random.default_rng(hyper.seed)
    d = X.shape[1]
    W = rng.normal(0.0, 0.01, size=(d, N_GENRES))
    b = np.zeros(N_GENRES)
    opt = _AdamW([(d, N_GENRES), (N_GENRES,)], hyper.lr, hyper.weight_decay)

    use_heldout = X_held is not None and len(X_held) > 0
    trace: list[float] = []
    best = np.inf
    best_params = (W.copy(), b.copy())
    stale = 0
    for _ in range(hyper.max_epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            _, dW, db = probe_loss_and_grad(W, b, X[batch], y[batch])
            opt.step([W, b], [dW, db])
        if not use_heldout:
            continue
        held = probe_loss(W, b, np.asarray(X_held, dtype=np.float64),
                          np.asarray(y_held, dtype=np.int64))
        trace.append(held)
        if held < best:
            best = held
            best_params = (W.copy(), b.copy())
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if use_heldout and hyper.max_epochs > 0:
        W, b = best_params
    return ProbeModel(W=W, b=b, heldout_trace=trace)


# ---------------------------------------------------------------------------
# shared plumbing

def _require_embeddings(embeddings: EmbeddingStore, refs: list[SentRef],
                        what: str) -> None:
    missing = embeddings.missing(refs)
    if missing:
        shown = ", ".join(sid for _, sid in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise ClassifyError(
            f"missing embeddings for {len(missing)} {what} sentences: "
            f"{shown}{more}")


def _metadata_mask(corpus: Corpus, refs: list[SentRef]) -> np.ndarray:
    mask = np.zeros((len(refs), N_GENRES), dtype=bool)
    for i, (tb_id, _) in enumerate(refs):
        for g in corpus.by_id(tb_id).metadata_genres:
            mask[i, GENRE_INDEX[g]] = True
    return mask


def _predictions_from_simplex(method: str, seed: int, refs: list[SentRef],
                              simplex: np.ndarray, corpus: Corpus,
                              restrict_to_metadata: bool) -> PredictionSet:
    if restrict_to_metadata:
        masked = np.where(_metadata_mask(corpus, refs), simplex, -np.inf)
        idx = np.argmax(masked, axis=1)
    else:
        idx = np.argmax(simplex, axis=1)
    return PredictionSet(method=method, seed=seed, refs=refs,
                         label_idx=idx, simplex=simplex)


# ---------------------------------------------------------------------------
# Class

def build_class_training(corpus: Corpus, refs: tuple[SentRef, ...] | list[SentRef],
                         ) -> tuple[list[SentRef], np.ndarray]:
    """Duplicate each sentence once per genre of its treebank's label set."""
    out_refs: list[SentRef] = []
    targets: list[int] = []
    for ref in refs:
        tb = corpus.by_id(ref[0])
        for genre in tb.metadata_genres:
            out_refs.append(ref)
            targets.append(GENRE_INDEX[genre])
    return out_refs, np.asarray(targets, dtype=np.int64)


def run_class(corpus: Corpus, embeddings: EmbeddingStore, split: SplitSpec,
              hyper: ProbeHyper, targets: list[SentRef] | None = None,
              restrict_to_metadata: bool = False) -> PredictionSet:
    """Train an 18-way probe on label-set-duplicated sentences and predict.

    Every probe_train sentence appears once per genre in its treebank's
    metadata; probe_heldout is duplicated the same way for early stopping.
    Targets default to the global test split.
    """
    targets = list(targets) if targets is not None else list(split.global_test)
    _require_embeddings(embeddings, list(split.probe_train), "probe_train")
    _require_embeddings(embeddings, list(split.probe_heldout), "probe_heldout")
    _require_embeddings(embeddings, targets, "target")

    train_refs, y = build_class_training(corpus, split.probe_train)
    held_refs, y_held = build_class_training(corpus, split.probe_heldout)
    model = train_probe(embeddings.rows_for(train_refs).astype(np.float64), y,
                        embeddings.rows_for(held_refs).astype(np.float64),
                        y_held, hyper)
    simplex = model.predict_proba(embeddings.rows_for(targets).astype(np.float64))
    return _predictions_from_simplex("class", hyper.seed, targets, simplex,
                                     corpus, restrict_to_metadata)


# ---------------------------------------------------------------------------
# Boot

@dataclass
class BootState:
    pool: dict[SentRef, int]
    known: set[int]
    round: int
    history: list[dict] = field(default_factory=list)


def confident_pool_mask(simplex: np.ndarray, allowed: np.ndarray,
                        tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose argmax probability reaches tau and whose argmax genre is
    allowed for that row. Returns (selected mask, argmax labels)."""
    labels = np.argmax(simplex, axis=1)
    conf = simplex[np.arange(simplex.shape[0]), labels]
    selected = (conf >= tau) & allowed[np.arange(simplex.shape[0]), labels]
    return selected, labels


def _apply_inference_rule(corpus: Corpus, split_refs: tuple[SentRef, ...],
                          pool: dict[SentRef, int], known: set[int]) -> int:
    """Treebanks with exactly one not-yet-known genre donate their unpooled
    sentences to that genre. Iterates until no treebank qualifies."""
    added = 0
    changed = True
    while changed:
        changed = False
        for tb in corpus:
            unknown = [GENRE_INDEX[g] for g in tb.metadata_genres
                       if GENRE_INDEX[g] not in known]
            if len(unknown) != 1:
                continue
            genre_idx = unknown[0]
            tb_refs = [r for r in split_refs
                       if r[0] == tb.tb_id and r not in pool]
            for ref in tb_refs:
                pool[ref] = genre_idx
                added += 1
            known.add(genre_idx)
            changed = True
    return added


def boot_train(corpus: Corpus, embeddings: EmbeddingStore, split: SplitSpec,
               hyper: ProbeHyper, tau: float = 0.99, max_rounds: int = 5,
               ) -> tuple[ProbeModel, BootState]:
    """Self-training from single-genre treebanks.

    Round 0 trains on single-genre probe_train sentences. Each round
    classifies the still-unpooled probe_train sentences of treebanks sharing
    a known genre, pools those whose argmax genre is both known, in the
    treebank's label set, and at confidence >= tau, applies the
    single-unknown-genre inference rule, and retrains from a fresh
    initialization. Heldout for early stopping is the single-genre part of
    probe_heldout, fixed across rounds. Stops on no pool growth or after
    max_rounds.
    """
    single = {tb.tb_id: GENRE_INDEX[tb.sole_genre]
              for tb in corpus if tb.is_single_genre}
    pool: dict[SentRef, int] = {ref: single[ref[0]]
                                for ref in split.probe_train if ref[0] in single}
    if not pool:
        raise ClassifyError("Boot requires single-genre seeds: no probe_train "
                            "sentence comes from a single-genre treebank")
    known: set[int] = set(pool.values())

    held_refs = [r for r in split.probe_heldout if r[0] in single]
    _require_embeddings(embeddings, list(split.probe_train), "probe_train")
    _require_embeddings(embeddings, held_refs, "probe_heldout")
    X_held = embeddings.rows_for(held_refs).astype(np.float64)
    y_held = np.asarray([single[r[0]] for r in held_refs], dtype=np.int64)

    def fit() -> ProbeModel:
        items = sorted(pool.items())
        X = embeddings.rows_for([r for r, _ in items]).astype(np.float64)
        y = np.asarray([g for _, g in items], dtype=np.int64)
        return train_probe(X, y, X_held, y_held, hyper)

    state = BootState(pool=pool, known=known, round=0, history=[])
    model = fit()
    state.history.append({"round": 0, "pool_size": len(pool),
                          "known": sorted(GENRES[i].value for i in known),
                          "pooled": len(pool), "inferred": 0})

    for round_ in range(1, max_rounds + 1):
        before = len(pool)
        candidates = [r for r in split.probe_train
                      if r not in pool
                      and any(GENRE_INDEX[g] in known
                              for g in corpus.by_id(r[0]).metadata_genres)]
        pooled_now = 0
        if candidates:
            simplex = model.predict_proba(
                embeddings.rows_for(candidates).astype(np.float64))
            allowed = _metadata_mask(corpus, candidates)
            allowed &= np.isin(np.arange(N_GENRES), sorted(known))[None, :]
            selected, labels = confident_pool_mask(simplex, allowed, tau)
            for i in np.flatnonzero(selected):
                pool[candidates[i]] = int(labels[i])
                pooled_now += 1
        inferred = _apply_inference_rule(corpus, split.probe_train, pool, known)
        state.round = round_
        state.history.append({"round": round_, "pool_size": len(pool),
                              "known": sorted(GENRES[i].value for i in known),
                              "pooled": pooled_now, "inferred": inferred})
        if len(pool) == before:
            break
        model = fit()
    return model, state


def run_boot(corpus: Corpus, embeddings: EmbeddingStore, split: SplitSpec,
             hyper: ProbeHyper, tau: float = 0.99, max_rounds: int = 5,
             targets: list[SentRef] | None = None,
             restrict_to_metadata: bool = False) -> PredictionSet:
    targets = list(targets) if targets is not None else list(split.global_test)
    _require_embeddings(embeddings, targets, "target")
    model, _ = boot_train(corpus, embeddings, split, hyper, tau=tau,
                          max_rounds=max_rounds)
    simplex = model.predict_proba(embeddings.rows_for(targets).astype(np.float64))
    return _predictions_from_simplex("boot", hyper.seed, targets, simplex,
                                     corpus, restrict_to_metadata)


# ---------------------------------------------------------------------------
# Baselines

def freq_ranking(corpus: Corpus, ranking: str = "treebanks") -> list[int]:
    """Genre indices from most to least frequent; ties follow label order."""
    if ranking not in ("treebanks", "sentences"):
        raise ClassifyError(f"unknown freq ranking {ranking!r}")
    counts = np.zeros(N_GENRES)
    for tb in corpus:
        weight = 1 if ranking == "treebanks" else tb.n_sentences
        for g in tb.metadata_genres:
            counts[GENRE_INDEX[g]] += weight
    return sorted(range(N_GENRES), key=lambda i: (-counts[i], i))


def baseline_freq(corpus: Corpus, targets: list[SentRef], seed: int = 41,
                  ranking: str = "treebanks") -> PredictionSet:
    """Every sentence gets the globally highest-ranked genre of its
    treebank's label set."""
    order = freq_ranking(corpus, ranking)
    rank_of = {g: r for r, g in enumerate(order)}
    idx = []
    for tb_id, _ in targets:
        tb = corpus.by_id(tb_id)
        idx.append(min((GENRE_INDEX[g] for g in tb.metadata_genres),
                       key=rank_of.__getitem__))
    return PredictionSet(method="freq", seed=seed, refs=list(targets),
                         label_idx=np.asarray(idx, dtype=np.int64))


def load_label_rows(label_embeddings: EmbeddingStore) -> np.ndarray:
    """Rows of the 18 genre label strings, reordered to fixed label order."""
    expected = {g.value for g in GENRES}
    got = {tb for tb, _ in label_embeddings.index}
    if got != expected or len(label_embeddings) != N_GENRES:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ClassifyError(
            f"label embedding store must hold exactly the 18 genre labels; "
            f"missing {missing}, unexpected {extra}")
    return np.stack([label_embeddings.row_for((g.value, g.value)).astype(np.float64)
                     for g in GENRES])


def baseline_zero(embeddings: EmbeddingStore, label_embeddings: EmbeddingStore,
                  targets: list[SentRef], seed: int = 41) -> PredictionSet:
    """Argmax cosine similarity to the embedded genre label strings."""
    if embeddings.dim != label_embeddings.dim:
        raise ClassifyError(
            f"sentence embeddings have dim {embeddings.dim} but label "
            f"embeddings have dim {label_embeddings.dim}")
    _require_embeddings(embeddings, list(targets), "target")
    L = load_label_rows(label_embeddings)
    l_norm = np.linalg.norm(L, axis=1)
    for i in np.flatnonzero(l_norm == 0):
        raise ClassifyError(f"label embedding {GENRES[i].value!r} has zero norm")

    X = embeddings.rows_for(targets).astype(np.float64)
    x_norm = np.linalg.norm(X, axis=1)
    for i in np.flatnonzero(x_norm == 0):
        raise ClassifyError(
            f"zero-norm sentence embedding for {targets[int(i)][1]!r}")
    sims = (X / x_norm[:, None]) @ (L / l_norm[:, None]).T
    idx = np.argmax(sims, axis=1)
    scores = sims[np.arange(len(targets)), idx]
    return PredictionSet(method="zero", seed=seed, refs=list(targets),
                         label_idx=idx, scores=scores)

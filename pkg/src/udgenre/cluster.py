"""Native Gaussian-mixture and latent-Dirichlet-allocation clustering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, sparse
from scipy.special import gammaln, logsumexp, psi

from .corpus import SentRef
from .features import FeatureMatrix

_LOG2PI = float(np.log(2.0 * np.pi))


class ClusterError(Exception):
    pass


@dataclass
class ClusterAssignment:
    """Per-sentence cluster indices with optional posterior rows.

    ``scope`` is "global" or a treebank id; ``flags`` lists diagnostics such
    as rows assigned by a degenerate rule.
    """

    scope: str
    refs: list[SentRef]
    labels: np.ndarray
    k: int
    posteriors: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.refs),):
            raise ClusterError("assignment length does not match refs")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ClusterError(f"cluster index outside 0..{self.k - 1}")
        if self.posteriors is not None:
            self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
            if self.posteriors.shape != (len(self.refs), self.k):
                raise ClusterError("posterior shape does not match refs and k")
            sums = self.posteriors.sum(axis=1)
            if self.posteriors.size and np.abs(sums - 1.0).max() > 1e-6:
                raise ClusterError("posterior rows do not sum to 1")

    def to_tsv(self) -> str:
        lines = [f"{tb}\t{sid}\t{int(c)}"
                 for (tb, sid), c in zip(self.refs, self.labels)]
        return "\n".join(lines) + ("\n" if lines else "")

    def as_dict(self) -> dict[SentRef, int]:
        return {ref: int(c) for ref, c in zip(self.refs, self.labels)}


# ---------------------------------------------------------------------------
# Gaussian mixture

@dataclass
class GmmModel:
    k: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: list[float]

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ClusterError("mixture weights do not sum to 1")
        trace = self.log_likelihood_trace
        for prev, cur in zip(trace, trace[1:]):
            if cur < prev - 1e-8 * max(abs(prev), 1.0):
                raise ClusterError("log-likelihood trace decreased during EM")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def save(self, path: str | Path) -> None:
        np.savez(path, kind="gmm", k=self.k, weights=self.weights,
                 means=self.means, covariances=self.covariances,
                 trace=np.asarray(self.log_likelihood_trace))

    @classmethod
    def load(cls, path: str | Path) -> "GmmModel":
        with np.load(path, allow_pickle=False) as z:
            if str(z["kind"]) != "gmm":
                raise ClusterError(f"{path} is not a gmm checkpoint")
            return cls(k=int(z["k"]), weights=z["weights"], means=z["means"],
                       covariances=z["covariances"],
                       log_likelihood_trace=[float(v) for v in z["trace"]])


def _pairwise_sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_init(X: np.ndarray, k: int, rng: np.random.Generator,
                 iters: int = 10) -> np.ndarray:
    """Farthest-point seeding followed by a short Lloyd refinement."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    min_d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centers[j] = X[int(np.argmax(min_d2))]
        min_d2 = np.minimum(min_d2, ((X - centers[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        labels = np.argmin(_pairwise_sq_dists(X, centers), axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = X[members].mean(axis=0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


def _gmm_log_prob(X: np.ndarray, weights: np.ndarray, means: np.ndarray,
                  covariances: np.ndarray) -> np.ndarray:
    """Per-sample, per-component log(weight * gaussian density) via Cholesky."""
    n, d = X.shape
    k = means.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    for j in range(k):
        try:
            chol = linalg.cholesky(covariances[j], lower=True)
        except linalg.LinAlgError:
            raise ClusterError(
                f"covariance collapse in component {j}: matrix not positive "
                f"definite despite regularization") from None
        dev = X - means[j]
        z = linalg.solve_triangular(chol, dev.T, lower=True)
        log_det = np.log(np.diag(chol)).sum()
        out[:, j] = (np.log(weights[j]) - 0.5 * (z * z).sum(axis=0)
                     - log_det - 0.5 * d * _LOG2PI)
    return out


def gmm_fit(X: np.ndarray, k: int, seed: int, max_iter: int = 100,
            tol: float = 1e-3, reg: float = 1e-6) -> GmmModel:
    """Full-covariance EM. Stops when the mean log-likelihood improves by
    less than tol, or after max_iter iterations."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ClusterError(f"gmm_fit needs a 2-d row matrix, got shape {X.shape}")
    n, d = X.shape
    if n < k:
        raise ClusterError(f"gmm_fit needs at least k={k} rows, got {n}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_init(X, k, rng)
    hard = np.argmin(_pairwise_sq_dists(X, centers), axis=1)

    weights = np.empty(k)
    means = np.empty((k, d))
    covariances = np.empty((k, d, d))
    for j in range(k):
        members = hard == j
        cnt = int(members.sum())
        if cnt == 0:
            dev_all = X - X.mean(axis=0)
            weights[j] = 1.0 / n
            means[j] = centers[j]
            covariances[j] = dev_all.T @ dev_all / n + reg * np.eye(d)
            continue
        weights[j] = cnt / n
        means[j] = X[members].mean(axis=0)
        dev = X[members] - means[j]
        covariances[j] = dev.T @ dev / cnt + reg * np.eye(d)
    weights /= weights.sum()

    trace: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        log_prob = _gmm_log_prob(X, weights, means, covariances)
        log_norm = logsumexp(log_prob, axis=1)
        mean_ll = float(log_norm.mean())
        trace.append(mean_ll)
        if mean_ll - prev < tol:
            break
        prev = mean_ll

        resp = np.exp(log_prob - log_norm[:, None])
        counts = resp.sum(axis=0)
        for j in range(k):
            if counts[j] < 10 * np.finfo(np.float64).tiny:
                raise ClusterError(
                    f"covariance collapse in component {j}: responsibility "
                    f"mass vanished")
        weights = counts / n
        means = (resp.T @ X) / counts[:, None]
        for j in range(k):
            dev = X - means[j]
            covariances[j] = ((resp[:, j][:, None] * dev).T @ dev) / counts[j]
            covariances[j][np.diag_indices(d)] += reg

    return GmmModel(k=k, weights=weights, means=means, covariances=covariances,
                    log_likelihood_trace=trace)


def gmm_assign(model: GmmModel, X: np.ndarray,
               refs: list[SentRef] | None = None,
               scope: str = "global") -> ClusterAssignment:
    """Assign rows to argmax-responsibility components; ties go to the lower
    component index."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ClusterError(
            f"row dim {X.shape[1] if X.ndim == 2 else '?'} does not match "
            f"model dim {model.dim}")
    log_prob = _gmm_log_prob(X, model.weights, model.means, model.covariances)
    log_norm = logsumexp(log_prob, axis=1)
    posteriors = np.exp(log_prob - log_norm[:, None])
    labels = np.argmax(posteriors, axis=1)
    if refs is None:
        refs = [("", str(i)) for i in range(X.shape[0])]
    return ClusterAssignment(scope=scope, refs=refs, labels=labels,
                             k=model.k, posteriors=posteriors)


# ---------------------------------------------------------------------------
# Latent Dirichlet allocation (batch variational Bayes)

@dataclass
class LdaModel:
    k: int
    topic_word: np.ndarray
    alpha: float
    eta: float
    elbo_trace: list[float]
    lam: np.ndarray

    def __post_init__(self) -> None:
        self.topic_word = np.asarray(self.topic_word, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.alpha <= 0 or self.eta <= 0:
            raise ClusterError("Dirichlet priors must be positive")
        sums = self.topic_word.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ClusterError("topic_word rows do not sum to 1")
        trace = self.elbo_trace
        for prev, cur in zip(trace, trace[1:]):
            if cur < prev - 1e-6:
                raise ClusterError("ELBO trace decreased during variational EM")

    @property
    def vocab_size(self) -> int:
        return self.topic_word.shape[1]

    def save(self, path: str | Path) -> None:
        np.savez(path, kind="lda", k=self.k, topic_word=self.topic_word,
                 alpha=self.alpha, eta=self.eta, lam=self.lam,
                 trace=np.asarray(self.elbo_trace))

    @classmethod
    def load(cls, path: str | Path) -> "LdaModel":
        with np.load(path, allow_pickle=False) as z:
            if str(z["kind"]) != "lda":
                raise ClusterError(f"{path} is not an lda checkpoint")
            return cls(k=int(z["k"]), topic_word=z["topic_word"],
                       alpha=float(z["alpha"]), eta=float(z["eta"]),
                       elbo_trace=[float(v) for v in z["trace"]], lam=z["lam"])


def _dirichlet_expectation(a: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return psi(a) - psi(a.sum())
    return psi(a) - psi(a.sum(axis=1))[:, None]


def _estep(counts: sparse.csr_matrix, gamma: np.ndarray, exp_elog_beta: np.ndarray,
           alpha: float, inner_iters: int = 100, mean_change_tol: float = 1e-3,
           ) -> tuple[np.ndarray, np.ndarray, sparse.csr_matrix]:
    """Lockstep variational inference of gamma for all documents.

    Returns (gamma, exp_elog_theta, R) where R holds count/phinorm per
    nonzero; sufficient statistics are exp_elog_beta * (R.T @ exp_elog_theta).T.
    """
    n = counts.shape[0]
    row_of = np.repeat(np.arange(n), np.diff(counts.indptr))
    cols = counts.indices
    cnts = counts.data

    exp_elog_theta = np.exp(_dirichlet_expectation(gamma))
    beta_cols = exp_elog_beta[:, cols].T  # (nnz, k)
    R = None
    for _ in range(inner_iters):
        phinorm = np.einsum("ij,ij->i", exp_elog_theta[row_of], beta_cols) + 1e-100
        R = sparse.csr_matrix((cnts / phinorm, cols, counts.indptr),
                              shape=counts.shape)
        new_gamma = alpha + exp_elog_theta * (R @ exp_elog_beta.T)
        change = float(np.abs(new_gamma - gamma).mean())
        gamma = new_gamma
        exp_elog_theta = np.exp(_dirichlet_expectation(gamma))
        if change < mean_change_tol:
            break
    phinorm = np.einsum("ij,ij->i", exp_elog_theta[row_of], beta_cols) + 1e-100
    R = sparse.csr_matrix((cnts / phinorm, cols, counts.indptr), shape=counts.shape)
    return gamma, exp_elog_theta, R


def _elbo(counts: sparse.csr_matrix, gamma: np.ndarray, lam: np.ndarray,
          alpha: float, eta: float) -> float:
    """Variational bound with phi at its optimum given (gamma, lambda)."""
    n, vocab = counts.shape
    k = lam.shape[0]
    elog_theta = _dirichlet_expectation(gamma)
    elog_beta = _dirichlet_expectation(lam)

    row_of = np.repeat(np.arange(n), np.diff(counts.indptr))
    cols = counts.indices
    cnts = counts.data
    word_ll = float(cnts @ logsumexp(elog_theta[row_of] + elog_beta[:, cols].T,
                                     axis=1))

    score = word_ll
    score += float(((alpha - gamma) * elog_theta).sum())
    score += float((gammaln(gamma) - gammaln(alpha)).sum())
    score += float((gammaln(alpha * k) - gammaln(gamma.sum(axis=1))).sum())

    score += float(((eta - lam) * elog_beta).sum())
    score += float((gammaln(lam) - gammaln(eta)).sum())
    score += float((gammaln(eta * vocab) - gammaln(lam.sum(axis=1))).sum())
    return score


def lda_fit(counts: FeatureMatrix | sparse.csr_matrix, k: int, seed: int,
            max_iter: int = 50, alpha: float | None = None,
            eta: float | None = None, tol: float = 1e-4) -> LdaModel:
    """Batch variational Bayes. The bound is recorded once per outer
    iteration, after the lambda update; gamma warm-starts across iterations,
    which makes the recorded trace non-decreasing."""
    if isinstance(counts, FeatureMatrix):
        counts = counts.rows
    counts = counts.tocsr().astype(np.float64)
    n, vocab = counts.shape
    if vocab == 0:
        raise ClusterError("lda_fit: empty vocabulary")
    if k < 1:
        raise ClusterError(f"lda_fit: k must be >= 1, got {k}")
    if k > vocab:
        raise ClusterError(f"lda_fit: k={k} exceeds vocabulary size {vocab}")
    doc_totals = np.asarray(counts.sum(axis=1)).ravel()
    if not (doc_totals > 0).any():
        raise ClusterError("lda_fit: all rows are empty")
    alpha = 1.0 / k if alpha is None else alpha
    eta = 1.0 / k if eta is None else eta

    rng = np.random.default_rng(seed)
    lam = rng.gamma(100.0, 1.0 / 100.0, (k, vocab))
    gamma = np.full((n, k), alpha) + (doc_totals / k)[:, None]

    trace: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        exp_elog_beta = np.exp(_dirichlet_expectation(lam))
        gamma, exp_elog_theta, R = _estep(counts, gamma, exp_elog_beta, alpha)
        lam = eta + exp_elog_beta * (R.T @ exp_elog_theta).T
        bound = _elbo(counts, gamma, lam, alpha, eta)
        trace.append(bound)
        if prev > -np.inf and abs(bound - prev) < tol * abs(prev):
            break
        prev = bound

    topic_word = lam / lam.sum(axis=1)[:, None]
    return LdaModel(k=k, topic_word=topic_word, alpha=alpha, eta=eta,
                    elbo_trace=trace, lam=lam)


def lda_assign(model: LdaModel, counts: FeatureMatrix | sparse.csr_matrix,
               refs: list[SentRef] | None = None,
               scope: str = "global") -> ClusterAssignment:
    """Infer per-document topic proportions and take the argmax topic.

    All-zero rows get topic 0 with a uniform posterior and are flagged.
    """
    if isinstance(counts, FeatureMatrix):
        counts = counts.rows
    counts = counts.tocsr().astype(np.float64)
    n, vocab = counts.shape
    if vocab != model.vocab_size:
        raise ClusterError(
            f"counts have {vocab} columns but model vocabulary is {model.vocab_size}")

    doc_totals = np.asarray(counts.sum(axis=1)).ravel()
    gamma = np.full((n, model.k), model.alpha) + (doc_totals / model.k)[:, None]
    exp_elog_beta = np.exp(_dirichlet_expectation(model.lam))
    gamma, _, _ = _estep(counts, gamma, exp_elog_beta, model.alpha)

    posteriors = gamma / gamma.sum(axis=1)[:, None]
    flags: list[str] = []
    empty = np.flatnonzero(doc_totals == 0)
    if empty.size:
        posteriors[empty] = 1.0 / model.k
        for i in empty:
            name = refs[i] if refs is not None else int(i)
            flags.append(f"empty document {name}: assigned topic 0 with "
                         f"uniform posterior")
    labels = np.argmax(posteriors, axis=1)
    labels[empty] = 0
    if refs is None:
        refs = [("", str(i)) for i in range(n)]
    return ClusterAssignment(scope=scope, refs=refs, labels=labels,
                             k=model.k, posteriors=posteriors, flags=flags)

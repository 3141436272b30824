"""Batch run orchestration: config validation, staged execution, caching, reports."""

import copy
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import ProbeHyper, baseline_freq, baseline_zero, run_boot, run_class
from .cluster import ClusterAssignment, gmm_assign, gmm_fit, lda_assign, lda_fit
from .corpus import (Corpus, LabelMapping, gold_labels_for_corpus, load_collection,
                     make_splits, write_split_manifest)
from .corpus import GENRES, N_GENRES, SentRef, SplitSpec
from .evaluate import (EvalError, GenreBounds, MetricReport, agreement, confusion,
                       confusion_csv, delta_bc, genre_bounds, micro_f1, purity)
from .features import EmbeddingStore, char_ngram_features, read_embeddings
from .labelprop import cluster_all_treebanks, propagate_labels, to_predictions
from .predictions import PredictionSet

FORMAT_TAG = "udgenre-report-v1"
CACHE_ENV = "UDGENRE_CACHE_DIR"

VALID_METHODS = ("freq", "zero", "class", "boot", "gmm", "lda", "gmm+l", "lda+l")
EMBEDDING_METHODS = frozenset({"zero", "class", "boot", "gmm", "gmm+l", "lda+l"})
CLUSTER_METHODS = frozenset({"gmm", "lda"})
EVAL_SPLITS = ("train", "dev", "test", "all")


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    pass


class StageError(PipelineError):
    """A pipeline stage failed after validation; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


_DEFAULTS: dict = {
    "mapping": None,
    "embeddings": None,
    "label_embeddings": None,
    "seeds": [41, 42, 43],
    "split": {"seed": 41, "train_frac": 0.10, "probe_frac": 0.70},
    "eval_split": "test",
    "cluster_scope": "all",
    "restrict_to_metadata": False,
    "freq_ranking": "treebanks",
    "probe": {"lr": 1e-3, "batch_size": 16, "max_epochs": 30, "patience": 3,
              "weight_decay": 0.01},
    "boot": {"tau": 0.99, "max_rounds": 5},
    "gmm": {"reg": 1e-6, "tol": 1e-3, "max_iter": 100},
    "lda": {"tol": 1e-4, "max_iter": 50},
    "ngram": {"n_min": 3, "n_max": 6, "min_df": 2, "max_df_frac": 0.30},
    "labelprop": {"rounds": 3, "metric": "cosine"},
    "outdir": "runs",
    "workers": 1,
    "cache_dir": None,
}
_REQUIRED = ("manifest", "methods")

# Execution knobs do not change results, so they stay out of the run id.
_NON_IDENTITY = ("outdir", "workers", "cache_dir")


@dataclass(frozen=True)
class RunConfig:
    """A validated run configuration.

    ``canonical`` is the fully defaulted dict (methods and seeds sorted);
    relative paths are resolved against ``base_dir``.
    """

    canonical: dict
    base_dir: Path

    def __getitem__(self, key: str):
        return self.canonical[key]

    def path(self, key: str) -> Path:
        return self.base_dir / self.canonical[key]

    @property
    def methods(self) -> list[str]:
        return list(self.canonical["methods"])

    @property
    def seeds(self) -> list[int]:
        return list(self.canonical["seeds"])

    @property
    def run_id(self) -> str:
        identity = {k: v for k, v in self.canonical.items()
                    if k not in _NON_IDENTITY}
        blob = json.dumps(identity, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    @property
    def outdir(self) -> Path:
        return self.base_dir / self.canonical["outdir"]

    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        if self.canonical["cache_dir"] is not None:
            return self.base_dir / self.canonical["cache_dir"]
        return self.outdir / "cache"


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def _merge_section(name: str, given, defaults: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"config field {name!r} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {unknown}")
    return {**defaults, **given}


def validate_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    """Fill defaults and check every precondition that can fail before work."""
    base_dir = Path(base_dir)
    unknown = sorted(set(raw) - set(_DEFAULTS) - set(_REQUIRED))
    if unknown:
        raise ConfigError(f"unknown config fields: {unknown}")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"config is missing required field {key!r}")

    cfg = copy.deepcopy(_DEFAULTS)
    cfg["manifest"] = raw["manifest"]
    for key, given in raw.items():
        if key in _REQUIRED:
            continue
        if isinstance(_DEFAULTS.get(key), dict):
            cfg[key] = _merge_section(key, given, _DEFAULTS[key])
        else:
            cfg[key] = given

    methods = raw["methods"]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list")
    bad = sorted(set(methods) - set(VALID_METHODS))
    if bad:
        raise ConfigError(f"unknown methods {bad}; valid: {list(VALID_METHODS)}")
    cfg["methods"] = sorted(set(methods), key=VALID_METHODS.index)

    seeds = cfg["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or any(not isinstance(s, int) or isinstance(s, bool) for s in seeds)):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    cfg["seeds"] = sorted(seeds)

    if cfg["eval_split"] not in EVAL_SPLITS:
        raise ConfigError(f"eval_split must be one of {list(EVAL_SPLITS)}")
    if cfg["cluster_scope"] not in ("all", "eval"):
        raise ConfigError("cluster_scope must be 'all' or 'eval'")
    if cfg["freq_ranking"] not in ("treebanks", "sentences"):
        raise ConfigError("freq_ranking must be 'treebanks' or 'sentences'")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    split = cfg["split"]
    if not (0.0 < split["train_frac"] < 1.0 and 0.0 < split["probe_frac"] < 1.0):
        raise ConfigError("split fractions must lie strictly between 0 and 1")
    if not (0.0 < cfg["boot"]["tau"] <= 1.0):
        raise ConfigError("boot.tau must lie in (0, 1]")

    manifest = base_dir / cfg["manifest"]
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    if cfg["mapping"] is not None and not (base_dir / cfg["mapping"]).is_file():
        raise ConfigError(f"mapping not found: {base_dir / cfg['mapping']}")

    needs_emb = sorted(set(cfg["methods"]) & EMBEDDING_METHODS,
                       key=VALID_METHODS.index)
    for name, needed_by in (("embeddings", needs_emb),
                            ("label_embeddings",
                             ["zero"] if "zero" in cfg["methods"] else [])):
        store = cfg[name]
        if needed_by and store is None:
            raise ConfigError(f"methods {needed_by} require {name} files")
        if store is not None:
            if not isinstance(store, dict) or set(store) != {"data", "index"}:
                raise ConfigError(f"{name} must be an object with keys data, index")
            for part in ("data", "index"):
                if not (base_dir / store[part]).is_file():
                    raise ConfigError(
                        f"{name} {part} file not found: {base_dir / store[part]}")
    return RunConfig(canonical=cfg, base_dir=base_dir)


# ---------------------------------------------------------------------------
# content hashing and the artifact cache

def _file_hash(path: Path, h=None) -> str:
    h = h or hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _corpus_hash(manifest: Path) -> str:
    """Hash of the manifest plus every treebank file it references."""
    h = hashlib.sha256()
    h.update(manifest.read_bytes())
    spec = json.loads(manifest.read_text(encoding="utf-8"))
    for tb in spec.get("treebanks", []):
        for split in sorted(tb.get("files", {})):
            _file_hash(manifest.parent / tb["files"][split], h)
    return h.hexdigest()


def _store_hash(data: Path, index: Path) -> str:
    h = hashlib.sha256()
    _file_hash(data, h)
    _file_hash(index, h)
    return h.hexdigest()


def _cache_path(cache_dir: Path, key: str, suffix: str) -> Path:
    return cache_dir / f"{key}{suffix}"


def cache_get(cache_dir: Path, key: str, suffix: str) -> bytes | None:
    path = _cache_path(cache_dir, key, suffix)
    return path.read_bytes() if path.is_file() else None


def cache_put(cache_dir: Path, key: str, suffix: str, data: bytes) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = _cache_path(cache_dir, key, suffix)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _assignment_to_bytes(asg: ClusterAssignment) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, scope=asg.scope, k=asg.k,
             tbs=np.array([tb for tb, _ in asg.refs]),
             sids=np.array([sid for _, sid in asg.refs]),
             labels=asg.labels, flags=np.array(asg.flags))
    return buf.getvalue()


def _assignment_from_bytes(data: bytes) -> ClusterAssignment:
    with np.load(io.BytesIO(data)) as z:
        refs = [(str(tb), str(sid)) for tb, sid in zip(z["tbs"], z["sids"])]
        return ClusterAssignment(scope=str(z["scope"]), refs=refs,
                                 labels=z["labels"].astype(np.int64),
                                 k=int(z["k"]), flags=[str(f) for f in z["flags"]])


# ---------------------------------------------------------------------------
# run execution

@dataclass
class _RunContext:
    config: RunConfig
    corpus: Corpus
    split: SplitSpec
    eval_refs: list[SentRef]
    gold: dict | None
    embeddings: EmbeddingStore | None
    label_embeddings: EmbeddingStore | None
    rundir: Path
    cache_dir: Path
    inputs_hash: str


@dataclass
class _JobResult:
    method: str
    seed: int
    kind: str
    files: list[str]
    metrics: dict[str, float | None]
    fractions: list[float] | None
    confusion: np.ndarray | None


def _stem(method: str, seed: int) -> str:
    return f"{method.replace('+', '-')}_seed{seed}"


def _check_embeddings(store: EmbeddingStore, refs: list[SentRef], what: str) -> None:
    missing = store.missing(refs)
    if missing:
        shown = ", ".join(sid for _, sid in missing[:5])
        raise PipelineError(
            f"{what}: {len(missing)} sentences lack embeddings (e.g. {shown})")


def _job_key(ctx: _RunContext, method: str, seed: int) -> str:
    cfg = ctx.config.canonical
    params = {
        "freq": {"freq_ranking": cfg["freq_ranking"]},
        "zero": {},
        "class": {"probe": cfg["probe"],
                  "restrict": cfg["restrict_to_metadata"]},
        "boot": {"probe": cfg["probe"], "boot": cfg["boot"],
                 "restrict": cfg["restrict_to_metadata"]},
        "gmm": {"gmm": cfg["gmm"], "scope": cfg["cluster_scope"]},
        "lda": {"lda": cfg["lda"], "ngram": cfg["ngram"],
                "scope": cfg["cluster_scope"]},
        "gmm+l": {"gmm": cfg["gmm"], "labelprop": cfg["labelprop"],
                  "scope": cfg["cluster_scope"]},
        "lda+l": {"lda": cfg["lda"], "ngram": cfg["ngram"],
                  "labelprop": cfg["labelprop"], "scope": cfg["cluster_scope"]},
    }[method]
    blob = json.dumps({"method": method, "seed": seed, "params": params,
                       "eval_split": cfg["eval_split"],
                       "inputs": ctx.inputs_hash,
                       "split": ctx.split.content_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _scope_refs(ctx: _RunContext) -> list[SentRef]:
    if ctx.config["cluster_scope"] == "eval":
        return list(ctx.eval_refs)
    return ctx.corpus.all_refs()


def _write_artifact(ctx: _RunContext, rel: str, data: bytes) -> str:
    path = ctx.rundir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return rel


def _subset_predictions(preds: PredictionSet, refs: list[SentRef]) -> PredictionSet:
    pos = {ref: i for i, ref in enumerate(preds.refs)}
    missing = [r for r in refs if r not in pos]
    if missing:
        tb, sid = missing[0]
        raise PipelineError(
            f"{len(missing)} evaluation sentences missing from {preds.method} "
            f"predictions (e.g. {sid})")
    rows = np.array([pos[r] for r in refs], dtype=np.intp)
    return PredictionSet(
        method=preds.method, seed=preds.seed, refs=list(refs),
        label_idx=preds.label_idx[rows],
        simplex=None if preds.simplex is None else preds.simplex[rows],
        scores=None if preds.scores is None else preds.scores[rows])


def _compute_predictions(ctx: _RunContext, method: str, seed: int,
                         ) -> tuple[PredictionSet, dict[str, bytes]]:
    """Run one genre-labeling method; extra per-method artifacts come back as
    suffix -> bytes for caching alongside the prediction file."""
    cfg = ctx.config.canonical
    targets = list(ctx.eval_refs)
    extras: dict[str, bytes] = {}
    if method == "freq":
        preds = baseline_freq(ctx.corpus, targets, seed=seed,
                              ranking=cfg["freq_ranking"])
    elif method == "zero":
        preds = baseline_zero(ctx.embeddings, ctx.label_embeddings, targets,
                              seed=seed)
    elif method in ("class", "boot"):
        hyper = ProbeHyper(seed=seed, **cfg["probe"])
        if method == "class":
            preds = run_class(ctx.corpus, ctx.embeddings, ctx.split, hyper,
                              targets=targets,
                              restrict_to_metadata=cfg["restrict_to_metadata"])
        else:
            preds = run_boot(ctx.corpus, ctx.embeddings, ctx.split, hyper,
                             tau=cfg["boot"]["tau"],
                             max_rounds=cfg["boot"]["max_rounds"],
                             targets=targets,
                             restrict_to_metadata=cfg["restrict_to_metadata"])
    else:
        base = method.split("+")[0]
        scope = _scope_refs(ctx)
        restrict = None if cfg["cluster_scope"] == "all" else set(scope)
        clusters = cluster_all_treebanks(
            ctx.corpus, base, ctx.embeddings, seed, restrict=restrict,
            ngram_params=cfg["ngram"], gmm_params=cfg["gmm"],
            lda_params=cfg["lda"])
        result = propagate_labels(clusters, rounds=cfg["labelprop"]["rounds"],
                                  metric=cfg["labelprop"]["metric"])
        extras[".prop.tsv"] = result.report_tsv().encode("utf-8")
        extras[".residue.tsv"] = result.residue_tsv().encode("utf-8")
        preds = _subset_predictions(to_predictions(result.clusters, method, seed),
                                    targets)
    return preds, extras


def _compute_clusters(ctx: _RunContext, method: str, seed: int,
                      ) -> tuple[ClusterAssignment, bytes]:
    """Fit one global clustering (k = 18) and return assignment + model npz."""
    cfg = ctx.config.canonical
    scope = _scope_refs(ctx)
    if method == "gmm":
        _check_embeddings(ctx.embeddings, scope, "gmm")
        X = ctx.embeddings.rows_for(scope).astype(np.float64)
        model = gmm_fit(X, k=N_GENRES, seed=seed, **cfg["gmm"])
        asg = gmm_assign(model, X, refs=scope, scope="global")
    else:
        texts = [ctx.corpus.sentence(r).text for r in scope]
        _, fm = char_ngram_features(texts, **cfg["ngram"])
        model = lda_fit(fm, k=N_GENRES, seed=seed, **cfg["lda"])
        asg = lda_assign(model, fm, refs=scope, scope="global")
    tmp = ctx.rundir / f".model-{_stem(method, seed)}.npz"
    model.save(tmp)
    model_bytes = tmp.read_bytes()
    tmp.unlink()
    return asg, model_bytes


def _eval_object(ctx: _RunContext, obj) -> tuple[dict, list | None, np.ndarray | None]:
    try:
        dbc = delta_bc(obj, ctx.corpus, ctx.eval_refs)
    except EvalError as exc:
        if "no pairs" not in str(exc):
            raise
        dbc = None
    metrics = {"delta_bc": dbc,
               "purity": purity(obj, ctx.corpus, ctx.eval_refs),
               "agreement": agreement(obj, ctx.corpus, ctx.eval_refs),
               "micro_f1": None}
    fractions = None
    conf = None
    if isinstance(obj, PredictionSet):
        by_ref = dict(zip(obj.refs, obj.label_idx))
        counts = np.bincount([by_ref[r] for r in ctx.eval_refs],
                             minlength=N_GENRES)
        fractions = (counts / max(len(ctx.eval_refs), 1)).tolist()
        if ctx.gold is not None:
            metrics["micro_f1"] = micro_f1(obj, ctx.gold, ctx.eval_refs)
            if metrics["micro_f1"] is not None:
                conf = confusion(obj, ctx.gold, ctx.eval_refs)
    return metrics, fractions, conf


def _run_job(ctx: _RunContext, method: str, seed: int) -> _JobResult:
    key = _job_key(ctx, method, seed)
    stem = _stem(method, seed)
    files: list[str] = []
    if method in CLUSTER_METHODS:
        asg_bytes = cache_get(ctx.cache_dir, key, ".clusters.npz")
        model_bytes = cache_get(ctx.cache_dir, key, ".model.npz")
        if asg_bytes is None or model_bytes is None:
            asg, model_bytes = _compute_clusters(ctx, method, seed)
            asg_bytes = _assignment_to_bytes(asg)
            cache_put(ctx.cache_dir, key, ".clusters.npz", asg_bytes)
            cache_put(ctx.cache_dir, key, ".model.npz", model_bytes)
        else:
            asg = _assignment_from_bytes(asg_bytes)
        files.append(_write_artifact(ctx, f"clusters/{stem}.tsv",
                                     asg.to_tsv().encode("utf-8")))
        files.append(_write_artifact(ctx, f"models/{stem}.npz", model_bytes))
        metrics, fractions, conf = _eval_object(ctx, asg)
        return _JobResult(method, seed, "clusters", files, metrics,
                          fractions, conf)

    tsv = cache_get(ctx.cache_dir, key, ".pred.tsv")
    extras: dict[str, bytes] = {}
    if tsv is None:
        preds, extras = _compute_predictions(ctx, method, seed)
        tsv = preds.to_tsv().encode("utf-8")
        cache_put(ctx.cache_dir, key, ".pred.tsv", tsv)
        for suffix, data in extras.items():
            cache_put(ctx.cache_dir, key, suffix, data)
    else:
        preds = PredictionSet.from_tsv(tsv.decode("utf-8"))
        for suffix in (".prop.tsv", ".residue.tsv"):
            data = cache_get(ctx.cache_dir, key, suffix)
            if data is not None:
                extras[suffix] = data
    files.append(_write_artifact(ctx, f"predictions/{stem}.tsv", tsv))
    for suffix, data in extras.items():
        name = "propagation" if suffix == ".prop.tsv" else "residue"
        files.append(_write_artifact(ctx, f"labelprop/{stem}.{name}.tsv", data))
    metrics, fractions, conf = _eval_object(ctx, preds)
    return _JobResult(method, seed, "predictions", files, metrics,
                      fractions, conf)


# ---------------------------------------------------------------------------
# report

@dataclass
class RunReport:
    run_id: str
    config: dict
    bounds: GenreBounds
    methods: dict[str, dict]
    files: list[str] = field(default_factory=list)
    rundir: Path | None = None

    def to_json_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "run_id": self.run_id,
            "config": self.config,
            "genre_bounds": {
                "genres": [g.value for g in GENRES],
                "treebank_count": self.bounds.treebank_count.tolist(),
                "min_frac": self.bounds.min_frac.tolist(),
                "uniform_frac": self.bounds.uniform_frac.tolist(),
                "max_frac": self.bounds.max_frac.tolist(),
            },
            "methods": self.methods,
            "files": sorted(self.files),
        }

    def save(self, path: Path) -> None:
        text = json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8", newline="\n")


def load_report(path: str | Path) -> RunReport:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read report {path}: {exc}") from None
    if d.get("format") != FORMAT_TAG:
        raise PipelineError(
            f"{path}: expected format {FORMAT_TAG!r}, got {d.get('format')!r}")
    gb = d["genre_bounds"]
    bounds = GenreBounds(min_frac=np.asarray(gb["min_frac"]),
                         uniform_frac=np.asarray(gb["uniform_frac"]),
                         max_frac=np.asarray(gb["max_frac"]),
                         treebank_count=np.asarray(gb["treebank_count"]))
    return RunReport(run_id=d["run_id"], config=d["config"], bounds=bounds,
                     methods=d["methods"], files=list(d["files"]),
                     rundir=path.parent)


def emit_plots(report: RunReport) -> set[Path]:
    """Write plot-ready CSVs: per-genre bounds with per-method predicted
    fractions, and one averaged confusion matrix per supervised method."""
    if report.rundir is None:
        raise PipelineError("report has no run directory")
    plots = report.rundir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written: set[Path] = set()

    frac_methods = [m for m in sorted(report.methods)
                    if report.methods[m].get("predicted_fractions") is not None]
    header = "genre,treebank_count,min_frac,uniform_frac,max_frac"
    for m in frac_methods:
        header += f",{m}_mean,{m}_sd"
    lines = [header]
    stats = {}
    for m in frac_methods:
        per_seed = np.asarray(report.methods[m]["predicted_fractions"])
        stats[m] = (per_seed.mean(axis=0), per_seed.std(axis=0, ddof=0))
    b = report.bounds
    for i, g in enumerate(GENRES):
        row = (f"{g.value},{int(b.treebank_count[i])},{b.min_frac[i]:.6f},"
               f"{b.uniform_frac[i]:.6f},{b.max_frac[i]:.6f}")
        for m in frac_methods:
            mean, sd = stats[m]
            row += f",{mean[i]:.6f},{sd[i]:.6f}"
        lines.append(row)
    dist = plots / "distribution.csv"
    dist.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    written.add(dist)

    for m in sorted(report.methods):
        matrix = report.methods[m].get("confusion_mean")
        if matrix is None:
            continue
        path = plots / f"confusion_{m.replace('+', '-')}.csv"
        path.write_text(confusion_csv(np.asarray(matrix)), encoding="utf-8",
                        newline="\n")
        written.add(path)
    return written


def _mark_failed(rundir: Path, stage: str, exc: Exception) -> None:
    failed = rundir / "failed"
    failed.mkdir(parents=True, exist_ok=True)
    text = f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n"
    (failed / f"{stage}.txt").write_text(text, encoding="utf-8", newline="\n")


def run_pipeline(config: RunConfig) -> RunReport:
    """Execute load, split, method x seed jobs, evaluation, and reporting.

    Artifacts land under <outdir>/<run_id>/. Job outputs are cached by
    content hash, so rerunning an unchanged config skips the model fits. Any
    stage failure leaves a marker file under <rundir>/failed/ and raises
    StageError; already-written artifacts stay in place.
    """
    rundir = config.outdir / config.run_id
    rundir.mkdir(parents=True, exist_ok=True)
    stale = rundir / "failed"
    if stale.is_dir():
        for f in stale.iterdir():
            f.unlink()
        stale.rmdir()

    def run_stage(stage: str, fn):
        try:
            return fn()
        except Exception as exc:
            _mark_failed(rundir, stage, exc)
            raise StageError(stage, str(exc)) from exc

    cfg = config.canonical
    corpus = run_stage("load", lambda: load_collection(config.path("manifest")))
    gold = None
    if cfg["mapping"] is not None:
        gold = run_stage("load", lambda: gold_labels_for_corpus(
            corpus, LabelMapping.from_json(config.path("mapping"))))

    def do_split() -> SplitSpec:
        split = make_splits(corpus, train_frac=cfg["split"]["train_frac"],
                            probe_frac=cfg["split"]["probe_frac"],
                            seed=cfg["split"]["seed"])
        write_split_manifest(split, rundir / "splits.tsv")
        return split

    split = run_stage("split", do_split)
    eval_refs = (corpus.all_refs() if cfg["eval_split"] == "all"
                 else corpus.all_refs(cfg["eval_split"]))
    if not eval_refs:
        exc = PipelineError(
            f"evaluation split {cfg['eval_split']!r} has no sentences")
        _mark_failed(rundir, "split", exc)
        raise StageError("split", str(exc)) from exc

    def load_store(name: str) -> EmbeddingStore | None:
        if cfg[name] is None:
            return None
        return read_embeddings(config.base_dir / cfg[name]["data"],
                               config.base_dir / cfg[name]["index"])

    embeddings = run_stage("embeddings", lambda: load_store("embeddings"))
    label_embeddings = run_stage("embeddings",
                                 lambda: load_store("label_embeddings"))

    h = hashlib.sha256()
    h.update(_corpus_hash(config.path("manifest")).encode())
    if cfg["embeddings"] is not None:
        h.update(_store_hash(config.base_dir / cfg["embeddings"]["data"],
                             config.base_dir / cfg["embeddings"]["index"]).encode())
    if cfg["label_embeddings"] is not None:
        h.update(_store_hash(
            config.base_dir / cfg["label_embeddings"]["data"],
            config.base_dir / cfg["label_embeddings"]["index"]).encode())
    ctx = _RunContext(config=config, corpus=corpus, split=split,
                      eval_refs=eval_refs, gold=gold, embeddings=embeddings,
                      label_embeddings=label_embeddings, rundir=rundir,
                      cache_dir=config.cache_dir(), inputs_hash=h.hexdigest())

    jobs = [(m, s) for m in config.methods for s in config.seeds]
    results: list[_JobResult] = []
    with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
        futures = [pool.submit(_run_job, ctx, m, s) for m, s in jobs]
        failure = None
        for (m, s), fut in zip(jobs, futures):
            exc = fut.exception()
            if exc is not None and failure is None:
                failure = (_stem(m, s), exc)
            elif exc is None:
                results.append(fut.result())
    if failure is not None:
        stage, exc = failure
        _mark_failed(rundir, stage, exc)
        raise StageError(stage, str(exc)) from exc

    by_method: dict[str, list[_JobResult]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r)

    methods_payload: dict[str, dict] = {}
    files = ["splits.tsv"]
    for m in config.methods:
        runs = sorted(by_method[m], key=lambda r: r.seed)
        rep = MetricReport(method=m, seeds=[r.seed for r in runs])
        for metric in ("delta_bc", "purity", "agreement", "micro_f1"):
            rep.add(metric, [r.metrics[metric] for r in runs])
        fractions = None
        if runs[0].fractions is not None:
            fractions = [r.fractions for r in runs]
        conf_mean = None
        if all(r.confusion is not None for r in runs):
            conf_mean = np.mean([r.confusion for r in runs], axis=0).tolist()
        job_files = sorted({f for r in runs for f in r.files})
        methods_payload[m] = {"kind": runs[0].kind,
                              "metrics": rep.to_json_dict(),
                              "predicted_fractions": fractions,
                              "confusion_mean": conf_mean,
                              "files": job_files}
        files.extend(job_files)

    bounds = run_stage("eval", lambda: genre_bounds(corpus))
    # The echo holds only result-determining fields, so reports from reruns
    # with different outdir/workers/cache_dir settings are byte-identical.
    echo = {k: v for k, v in cfg.items() if k not in _NON_IDENTITY}
    report = RunReport(run_id=config.run_id, config=echo, bounds=bounds,
                       methods=methods_payload, files=files, rundir=rundir)
    plot_files = run_stage("plots", lambda: emit_plots(report))
    report.files.extend(p.relative_to(rundir).as_posix() for p in plot_files)
    report.files.append("report.json")
    run_stage("report", lambda: report.save(rundir / "report.json"))
    return report

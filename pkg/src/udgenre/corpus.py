"""Corpus model: CoNLL-U parsing, genre metadata, gold labels and data splits."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class GenreLabel(str, Enum):
    """The closed 18-genre universe, in fixed declaration order."""

    ACADEMIC = "academic"
    BIBLE = "bible"
    BLOG = "blog"
    EMAIL = "email"
    FICTION = "fiction"
    GOVERNMENT = "government"
    GRAMMAR_EXAMPLES = "grammar-examples"
    LEARNER_ESSAYS = "learner-essays"
    LEGAL = "legal"
    MEDICAL = "medical"
    NEWS = "news"
    NONFICTION = "nonfiction"
    POETRY = "poetry"
    REVIEWS = "reviews"
    SOCIAL = "social"
    SPOKEN = "spoken"
    WEB = "web"
    WIKI = "wiki"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


GENRES: tuple[GenreLabel, ...] = tuple(GenreLabel)
GENRE_INDEX: dict[GenreLabel, int] = {g: i for i, g in enumerate(GENRES)}
N_GENRES = len(GENRES)

SPLIT_NAMES = ("train", "dev", "test")

#: (treebank id, sent_id) pair used to address a sentence anywhere in the corpus.
SentRef = tuple[str, str]


class CorpusError(Exception):
    """Base error for corpus loading and validation."""


class ConlluParseError(CorpusError):
    pass


class CollectionError(CorpusError):
    pass


class MappingError(CorpusError):
    pass


def parse_genre(name: str) -> GenreLabel:
    try:
        return GenreLabel(name)
    except ValueError:
        raise CollectionError(f"unknown genre {name!r}; expected one of "
                              f"{', '.join(g.value for g in GENRES)}") from None


def sort_genres(genres: Iterable[GenreLabel]) -> tuple[GenreLabel, ...]:
    """Deduplicate and order genres by the fixed declaration order."""
    return tuple(sorted(set(genres), key=GENRE_INDEX.__getitem__))


@dataclass(frozen=True)
class Sentence:
    """A single sentence with its preceding comment metadata.

    ``tokens`` holds surface forms of regular (integer-id) token lines only;
    multiword-token and empty-node lines contribute to ``text`` reconstruction
    but not to the token count. ``comments`` preserves the order of ``# ...``
    lines; a comment without ``=`` is stored with value ``None``.
    """

    sent_id: str
    text: str
    tokens: tuple[str, ...]
    comments: tuple[tuple[str, str | None], ...] = ()

    def __post_init__(self) -> None:
        if not self.sent_id:
            raise ValueError("sentence has empty sent_id")
        if not self.text:
            raise ValueError(f"sentence {self.sent_id!r} has empty text")
        if not self.tokens:
            raise ValueError(f"sentence {self.sent_id!r} has no tokens")

    def comment(self, key: str) -> str | None:
        """First comment value for ``key``, or None."""
        for k, v in self.comments:
            if k == key:
                return v
        return None


@dataclass
class Treebank:
    """One treebank: sentences partitioned into declared splits plus metadata."""

    tb_id: str
    language: str
    splits: dict[str, list[Sentence]]
    metadata_genres: tuple[GenreLabel, ...]

    def __post_init__(self) -> None:
        if not self.tb_id:
            raise CollectionError("treebank with empty id")
        genres = sort_genres(self.metadata_genres)
        if not genres:
            raise CollectionError(f"treebank {self.tb_id!r} declares no genres")
        self.metadata_genres = genres
        for name in self.splits:
            if name not in SPLIT_NAMES:
                raise CollectionError(
                    f"treebank {self.tb_id!r} has unknown split {name!r}")
        seen: dict[str, str] = {}
        for name in SPLIT_NAMES:
            for sent in self.splits.get(name, []):
                if sent.sent_id in seen:
                    raise CollectionError(
                        f"duplicate sent_id {sent.sent_id!r} in treebank "
                        f"{self.tb_id!r} (splits {seen[sent.sent_id]!r} and {name!r})")
                seen[sent.sent_id] = name

    @property
    def sentences(self) -> list[Sentence]:
        return [s for name in SPLIT_NAMES for s in self.splits.get(name, [])]

    @property
    def n_sentences(self) -> int:
        return sum(len(v) for v in self.splits.values())

    @property
    def is_single_genre(self) -> bool:
        return len(self.metadata_genres) == 1

    @property
    def sole_genre(self) -> GenreLabel:
        if not self.is_single_genre:
            raise ValueError(f"treebank {self.tb_id!r} is multi-genre")
        return self.metadata_genres[0]

    def refs(self, split: str | None = None) -> list[SentRef]:
        if split is None:
            return [(self.tb_id, s.sent_id) for s in self.sentences]
        return [(self.tb_id, s.sent_id) for s in self.splits.get(split, [])]


@dataclass
class Corpus:
    """A collection of treebanks over the shared 18-label universe."""

    treebanks: list[Treebank]
    label_universe: tuple[GenreLabel, ...] = GENRES

    def __post_init__(self) -> None:
        ids = [tb.tb_id for tb in self.treebanks]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CollectionError(f"duplicate treebank ids: {dupes}")
        self._by_id = {tb.tb_id: tb for tb in self.treebanks}

    def __iter__(self) -> Iterator[Treebank]:
        return iter(self.treebanks)

    def __len__(self) -> int:
        return len(self.treebanks)

    def by_id(self, tb_id: str) -> Treebank:
        try:
            return self._by_id[tb_id]
        except KeyError:
            raise CollectionError(f"no treebank {tb_id!r} in corpus") from None

    @property
    def total_sentences(self) -> int:
        return sum(tb.n_sentences for tb in self.treebanks)

    def all_refs(self, split: str | None = None) -> list[SentRef]:
        return [r for tb in self.treebanks for r in tb.refs(split)]

    def sentence(self, ref: SentRef) -> Sentence:
        tb = self.by_id(ref[0])
        if not hasattr(tb, "_sent_index"):
            tb._sent_index = {s.sent_id: s for s in tb.sentences}  # type: ignore[attr-defined]
        try:
            return tb._sent_index[ref[1]]  # type: ignore[attr-defined]
        except KeyError:
            raise CorpusError(f"no sentence {ref[1]!r} in treebank {ref[0]!r}") from None


# ---------------------------------------------------------------------------
# CoNLL-U parsing

_N_COLUMNS = 10


def _parse_comment(line: str) -> tuple[str, str | None]:
    body = line[1:].strip()
    if "=" in body:
        key, value = body.split("=", 1)
        return key.strip(), value.strip()
    return body, None


def _space_after(misc: str) -> bool:
    return "SpaceAfter=No" not in misc.split("|")


def _reconstruct_text(entries: list[tuple[str, str, str]]) -> str:
    """Join surface forms, honoring SpaceAfter=No and multiword token ranges."""
    parts: list[str] = []
    skip_until = 0
    for tok_id, form, misc in entries:
        if "." in tok_id:
            continue  # empty nodes carry no surface text
        if "-" in tok_id:
            lo, hi = tok_id.split("-", 1)
            skip_until = int(hi)
            parts.append(form + (" " if _space_after(misc) else ""))
            continue
        if int(tok_id) <= skip_until:
            continue  # covered by a preceding multiword token
        parts.append(form + (" " if _space_after(misc) else ""))
    return "".join(parts).rstrip()


def parse_conllu(path: str | Path) -> list[Sentence]:
    """Parse one CoNLL-U file into sentences (a treebank fragment).

    Comment lines before the first token line of each block become the
    sentence's comments. A missing ``# text`` comment is reconstructed from
    surface forms, honoring ``SpaceAfter=No``. Raises ConlluParseError with a
    line number on malformed token lines and on duplicate sent_ids.
    """
    path = Path(path)
    sentences: list[Sentence] = []
    seen_ids: dict[str, int] = {}

    comments: list[tuple[str, str | None]] = []
    entries: list[tuple[str, str, str]] = []
    block_start = 0

    def flush(end_line: int) -> None:
        nonlocal comments, entries
        if not comments and not entries:
            return
        if not entries:
            raise ConlluParseError(
                f"{path}:{block_start}: sentence block without token lines")
        sent_id = None
        for k, v in comments:
            if k == "sent_id":
                sent_id = v
                break
        if not sent_id:
            raise ConlluParseError(
                f"{path}:{block_start}: sentence block without sent_id")
        if sent_id in seen_ids:
            raise ConlluParseError(
                f"{path}:{block_start}: duplicate sent_id {sent_id!r} "
                f"(first seen at line {seen_ids[sent_id]})")
        seen_ids[sent_id] = block_start
        text = None
        for k, v in comments:
            if k == "text" and v:
                text = v
                break
        if text is None:
            text = _reconstruct_text(entries)
        tokens = tuple(form for tok_id, form, _ in entries
                       if "-" not in tok_id and "." not in tok_id)
        try:
            sentences.append(Sentence(sent_id, text, tokens, tuple(comments)))
        except ValueError as exc:
            raise ConlluParseError(f"{path}:{block_start}: {exc}") from None
        comments, entries = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if not comments and not entries:
                block_start = lineno
            if line.startswith("#"):
                if entries:
                    raise ConlluParseError(
                        f"{path}:{lineno}: comment after token lines")
                comments.append(_parse_comment(line))
                continue
            cols = line.split("\t")
            if len(cols) != _N_COLUMNS:
                raise ConlluParseError(
                    f"{path}:{lineno}: expected {_N_COLUMNS} columns, got {len(cols)}")
            entries.append((cols[0], cols[1], cols[9]))
    flush(-1)
    return sentences


def sentences_to_conllu(sentences: Iterable[Sentence]) -> str:
    """Serialize sentences back to CoNLL-U text.

    Token lines are emitted minimally (id + form); reparsing reproduces
    sent_ids, token counts and all comments exactly.
    """
    blocks = []
    for sent in sentences:
        lines = []
        for key, value in sent.comments:
            lines.append(f"# {key}" if value is None else f"# {key} = {value}")
        for i, form in enumerate(sent.tokens, start=1):
            lines.append("\t".join([str(i), form] + ["_"] * 8))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


# ---------------------------------------------------------------------------
# Collection manifest

def load_collection(manifest_path: str | Path) -> Corpus:
    """Load a corpus from a collection manifest (JSON).

    Manifest shape::

        {"treebanks": [{"id": "en_ewt", "language": "en",
                        "genres": ["news", "social"],
                        "files": {"train": "en_ewt-train.conllu", ...}}, ...]}

    File paths are resolved relative to the manifest's directory. Genre
    strings outside the 18-label universe and empty genre lists are rejected.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CollectionError(f"cannot read manifest {manifest_path}: {exc}") from None
    entries = manifest.get("treebanks")
    if not isinstance(entries, list) or not entries:
        raise CollectionError(f"{manifest_path}: manifest lists no treebanks")

    base = manifest_path.parent
    treebanks = []
    for entry in entries:
        tb_id = entry.get("id")
        if not tb_id:
            raise CollectionError(f"{manifest_path}: treebank entry without id")
        raw_genres = entry.get("genres")
        if not raw_genres:
            raise CollectionError(f"treebank {tb_id!r} has an empty genre list")
        genres = tuple(parse_genre(g) for g in raw_genres)
        files = entry.get("files") or {}
        splits: dict[str, list[Sentence]] = {}
        for split_name, rel in files.items():
            if split_name not in SPLIT_NAMES:
                raise CollectionError(
                    f"treebank {tb_id!r}: unknown split {split_name!r}")
            splits[split_name] = parse_conllu(base / rel)
        treebanks.append(Treebank(tb_id=tb_id,
                                  language=entry.get("language", ""),
                                  splits=splits,
                                  metadata_genres=genres))
    return Corpus(treebanks=treebanks)


# ---------------------------------------------------------------------------
# Instance-level gold labels

_MATCH_KINDS = ("comment-key", "sentid-prefix")


@dataclass(frozen=True)
class MappingRule:
    """One record of the label-mapping file."""

    treebank: str
    kind: str  # "comment-key" | "sentid-prefix"
    raw: str
    genre: GenreLabel
    comment_key: str = "genre"

    def __post_init__(self) -> None:
        if self.kind not in _MATCH_KINDS:
            raise MappingError(f"unknown match kind {self.kind!r} "
                               f"(expected one of {_MATCH_KINDS})")


@dataclass
class LabelMapping:
    """Treebank-specific raw label -> UD genre associations."""

    rules: list[MappingRule]

    @classmethod
    def from_json(cls, path: str | Path) -> "LabelMapping":
        path = Path(path)
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise MappingError(f"cannot read mapping {path}: {exc}") from None
        if not isinstance(records, list):
            raise MappingError(f"{path}: mapping file must be a JSON list")
        rules = []
        for rec in records:
            try:
                rules.append(MappingRule(
                    treebank=rec["treebank"],
                    kind=rec["kind"],
                    raw=rec["raw"],
                    genre=parse_genre(rec["genre"]),
                    comment_key=rec.get("key", "genre"),
                ))
            except KeyError as exc:
                raise MappingError(f"{path}: mapping record missing field {exc}") from None
        return cls(rules=rules)

    def rules_for(self, tb_id: str) -> list[MappingRule]:
        return [r for r in self.rules if r.treebank == tb_id]


@dataclass
class GoldLabels:
    """Gold instance labels for one treebank plus the unmapped-raw report."""

    treebank: str
    labels: dict[str, GenreLabel]
    unmapped: list[tuple[str, str]] = field(default_factory=list)


def extract_instance_labels(treebank: Treebank, mapping: LabelMapping) -> GoldLabels:
    """Extract per-sentence gold genres from comments or sent_id prefixes.

    A sentence receives a label iff a mapping rule for this treebank matches;
    mapped genres must be members of the treebank's metadata_genres (mapping
    criterion 1, checked here). Raw labels present but unmapped go to the
    ``unmapped`` report instead of raising.
    """
    rules = mapping.rules_for(treebank.tb_id)
    allowed = set(treebank.metadata_genres)
    for rule in rules:
        if rule.genre not in allowed:
            raise MappingError(
                f"mapping rule ({rule.treebank!r}, {rule.raw!r}) -> {rule.genre.value!r} "
                f"names a genre outside the treebank's metadata genres "
                f"{[g.value for g in treebank.metadata_genres]}")

    comment_rules: dict[str, dict[str, GenreLabel]] = {}
    prefix_rules: list[MappingRule] = []
    for rule in rules:
        if rule.kind == "comment-key":
            comment_rules.setdefault(rule.comment_key, {})[rule.raw] = rule.genre
        else:
            prefix_rules.append(rule)

    result = GoldLabels(treebank=treebank.tb_id, labels={})
    for sent in treebank.sentences:
        label = None
        for key, value_map in comment_rules.items():
            raw = sent.comment(key)
            if raw is None:
                continue
            if raw in value_map:
                label = value_map[raw]
            else:
                result.unmapped.append((sent.sent_id, raw))
            break
        if label is None:
            for rule in prefix_rules:
                if sent.sent_id.startswith(rule.raw):
                    label = rule.genre
                    break
        if label is not None:
            result.labels[sent.sent_id] = label
    return result


def gold_labels_for_corpus(corpus: Corpus, mapping: LabelMapping) -> dict[SentRef, GenreLabel]:
    """Gold labels for every mappable sentence in the corpus, keyed by ref."""
    gold: dict[SentRef, GenreLabel] = {}
    for tb in corpus:
        extracted = extract_instance_labels(tb, mapping)
        for sent_id, genre in extracted.labels.items():
            gold[(tb.tb_id, sent_id)] = genre
    return gold


# ---------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class SplitSpec:
    """Global split assignment: four pairwise-disjoint sets of sentence refs."""

    global_test: tuple[SentRef, ...]
    probe_train: tuple[SentRef, ...]
    probe_heldout: tuple[SentRef, ...]
    global_dev: tuple[SentRef, ...]
    seed: int

    def __post_init__(self) -> None:
        sets = [set(self.global_test), set(self.probe_train),
                set(self.probe_heldout), set(self.global_dev)]
        total = sum(len(s) for s in sets)
        if len(set().union(*sets)) != total:
            raise CorpusError("SplitSpec sets are not pairwise disjoint")

    def named_sets(self) -> dict[str, tuple[SentRef, ...]]:
        return {"global_test": self.global_test,
                "probe_train": self.probe_train,
                "probe_heldout": self.probe_heldout,
                "global_dev": self.global_dev}

    def to_manifest_text(self) -> str:
        lines = []
        for name, refs in self.named_sets().items():
            lines.extend(f"{tb}\t{sid}\t{name}" for tb, sid in refs)
        return "\n".join(sorted(lines)) + ("\n" if lines else "")

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_manifest_text().encode("utf-8")).hexdigest()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def make_splits(corpus: Corpus, train_frac: float = 0.10, probe_frac: float = 0.70,
                seed: int = 41) -> SplitSpec:
    """Build the global split assignment from declared per-treebank splits.

    Declared test splits pass through to global_test untouched. Each
    treebank's train+dev sentences are shuffled by a generator seeded from
    (seed, treebank id); the nearest-integer train_frac share forms the probe
    pool (at least one sentence when the treebank has >= 10), which is divided
    probe_frac/(1-probe_frac) into probe_train/probe_heldout; the remainder is
    global_dev. Deterministic: equal (corpus, seed) gives an equal SplitSpec.
    """
    if not (0.0 < train_frac < 1.0) or not (0.0 < probe_frac < 1.0):
        raise ValueError("split fractions must lie strictly between 0 and 1")

    test: list[SentRef] = []
    ptrain: list[SentRef] = []
    pheld: list[SentRef] = []
    dev: list[SentRef] = []
    for tb in corpus:
        test.extend((tb.tb_id, s.sent_id) for s in tb.splits.get("test", []))
        pool = [s.sent_id for s in tb.splits.get("train", []) + tb.splits.get("dev", [])]
        n = len(pool)
        if n == 0:
            continue
        rng = np.random.default_rng([seed, _stable_int(tb.tb_id)])
        order = rng.permutation(n)
        m = _round_half_up(train_frac * n)
        t = _round_half_up(probe_frac * m)
        if n >= 10:
            m = max(m, 1)
            t = max(_round_half_up(probe_frac * m), 1)
        m = min(m, n)
        t = min(t, m)
        shuffled = [pool[i] for i in order]
        ptrain.extend((tb.tb_id, sid) for sid in shuffled[:t])
        pheld.extend((tb.tb_id, sid) for sid in shuffled[t:m])
        dev.extend((tb.tb_id, sid) for sid in shuffled[m:])

    return SplitSpec(global_test=tuple(sorted(test)),
                     probe_train=tuple(sorted(ptrain)),
                     probe_heldout=tuple(sorted(pheld)),
                     global_dev=tuple(sorted(dev)),
                     seed=seed)


def write_split_manifest(spec: SplitSpec, path: str | Path) -> None:
    Path(path).write_text(spec.to_manifest_text(), encoding="utf-8", newline="\n")

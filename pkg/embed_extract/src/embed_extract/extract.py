"""Collection text reading, embedding extraction jobs, binary file output."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger("embed_extract")

GENRES = ("academic", "bible", "blog", "email", "fiction", "government",
          "grammar-examples", "learner-essays", "legal", "medical", "news",
          "nonfiction", "poetry", "reviews", "social", "spoken", "web", "wiki")

SPLIT_NAMES = ("train", "dev", "test")

_MAGIC = b"EMB1"


class ExtractError(Exception):
    pass


# ---------------------------------------------------------------------------
# CoNLL-U text reading

def _space_after(misc: str) -> bool:
    return "SpaceAfter=No" not in misc.split("|")


def _join_tokens(entries: list[tuple[str, str, str]]) -> str:
    """Join surface forms, honoring SpaceAfter=No and multiword token ranges."""
    parts: list[str] = []
    skip_until = 0
    for tok_id, form, misc in entries:
        if "." in tok_id:
            continue  # empty nodes carry no surface text
        if "-" in tok_id:
            skip_until = int(tok_id.split("-", 1)[1])
            parts.append(form + (" " if _space_after(misc) else ""))
            continue
        if int(tok_id) <= skip_until:
            continue  # covered by a preceding multiword token
        parts.append(form + (" " if _space_after(misc) else ""))
    return "".join(parts).rstrip()


def read_texts(path: str | Path) -> list[tuple[str, str, str]]:
    """Read one CoNLL-U file into (sent_id, text, source) triples.

    Source is "text" when the sentence carries a ``# text`` comment and
    "tokens" when the text is joined from surface forms. Empty texts are
    rejected: every row of the output files must have a nonzero vector.
    """
    path = Path(path)
    out: list[tuple[str, str, str]] = []
    seen: set[str] = set()

    comments: dict[str, str] = {}
    entries: list[tuple[str, str, str]] = []
    block_start = 0

    def flush() -> None:
        nonlocal comments, entries
        if not comments and not entries:
            return
        if not entries:
            raise ExtractError(
                f"{path}:{block_start}: sentence block without token lines")
        sent_id = comments.get("sent_id")
        if not sent_id:
            raise ExtractError(
                f"{path}:{block_start}: sentence block without sent_id")
        if sent_id in seen:
            raise ExtractError(
                f"{path}:{block_start}: duplicate sent_id {sent_id!r}")
        seen.add(sent_id)
        text, source = comments.get("text"), "text"
        if not text:
            text, source = _join_tokens(entries), "tokens"
        if not text.strip():
            raise ExtractError(
                f"{path}:{block_start}: empty text for sent_id {sent_id!r}")
        out.append((sent_id, text, source))
        comments, entries = {}, []

    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ExtractError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            flush()
            continue
        if not comments and not entries:
            block_start = lineno
        if line.startswith("#"):
            if entries:
                raise ExtractError(f"{path}:{lineno}: comment after token lines")
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                comments[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ExtractError(
                f"{path}:{lineno}: expected 10 tab-separated fields, got {len(cols)}")
        entries.append((cols[0], cols[1], cols[9]))
    flush()
    return out


# ---------------------------------------------------------------------------
# Collection manifest

@dataclass(frozen=True)
class SentenceText:
    """One text to embed, addressed by (treebank, sent_id)."""

    treebank: str
    sent_id: str
    text: str
    source: str  # "text" | "tokens" | "label"


def collect_sentences(manifest_path: str | Path) -> list[SentenceText]:
    """All sentences of a collection manifest, in manifest order.

    Treebanks appear in listed order, each treebank's files in declared
    order, sentences in file order. (treebank, sent_id) pairs must be unique
    across the whole collection since they key the embedding index.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ExtractError(f"cannot read manifest {manifest_path}: {exc}") from None
    entries = manifest.get("treebanks")
    if not isinstance(entries, list) or not entries:
        raise ExtractError(f"{manifest_path}: manifest lists no treebanks")

    base = manifest_path.parent
    out: list[SentenceText] = []
    seen: set[tuple[str, str]] = set()
    for entry in entries:
        tb_id = entry.get("id")
        if not tb_id:
            raise ExtractError(f"{manifest_path}: treebank entry without id")
        files = entry.get("files") or {}
        for split_name, rel in files.items():
            if split_name not in SPLIT_NAMES:
                raise ExtractError(
                    f"treebank {tb_id!r}: unknown split {split_name!r}")
            for sent_id, text, source in read_texts(base / rel):
                if (tb_id, sent_id) in seen:
                    raise ExtractError(
                        f"treebank {tb_id!r}: sent_id {sent_id!r} appears "
                        f"in more than one split file")
                seen.add((tb_id, sent_id))
                out.append(SentenceText(tb_id, sent_id, text, source))
    return out


# ---------------------------------------------------------------------------
# Binary output

def write_embedding_files(rows: np.ndarray, index: list[tuple[str, str]],
                          data_path: str | Path, index_path: str | Path) -> None:
    """Write the binary data file and its aligned text index.

    Data file layout (little-endian): 4-byte magic "EMB1", uint32 row count,
    uint32 dimension, then N*dim float32 values row-major. Index file: UTF-8,
    one "treebank_id<TAB>sent_id" line per row, same order.
    """
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != len(index):
        raise ExtractError(
            f"rows have shape {rows.shape} but the index has {len(index)} keys")
    try:
        with open(data_path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
            fh.write(rows.tobytes())
        with open(index_path, "w", encoding="utf-8", newline="\n") as fh:
            for first, second in index:
                fh.write(f"{first}\t{second}\n")
    except OSError as exc:
        raise ExtractError(f"cannot write embeddings: {exc}") from None


# ---------------------------------------------------------------------------
# Extraction jobs

@dataclass(frozen=True)
class ExtractionJob:
    """One extraction: a collection's sentences, or the 18 label strings."""

    out_data: Path
    out_index: Path
    manifest: Path | None = None
    encoder: str = "bert-base-multilingual-cased"
    batch_size: int = 32
    device: str = "cpu"
    labels: bool = False
    log_path: Path | None = None  # default: <out_data>.log


def run(job: ExtractionJob) -> dict:
    """Execute a job: encode, write data + index + provenance log.

    Identical texts are encoded once and share the resulting row, so
    duplicate sentences always get bitwise-identical vectors. The provenance
    log records per row whether the text came from a ``# text`` comment or a
    token join, and whether it was truncated.
    """
    from .encoder import Encoder  # deferred: importing torch is slow

    if job.labels:
        records = [SentenceText(g, g, g, "label") for g in GENRES]
    else:
        if job.manifest is None:
            raise ExtractError("a manifest is required unless labels are requested")
        records = collect_sentences(job.manifest)
        if not records:
            raise ExtractError(f"{job.manifest}: no sentences to embed")

    encoder = Encoder(job.encoder, device=job.device)
    position: dict[str, int] = {}
    for rec in records:
        position.setdefault(rec.text, len(position))
    unique_rows, unique_trunc = encoder.encode(list(position), batch_size=job.batch_size)

    rows = unique_rows[[position[rec.text] for rec in records]]
    index = [(rec.treebank, rec.sent_id) for rec in records]
    truncated = 0
    for rec in records:
        if unique_trunc[position[rec.text]]:
            truncated += 1
            log.warning("truncated %s/%s to %d subwords",
                        rec.treebank, rec.sent_id, encoder.max_length)
    if truncated:
        log.info("truncated %d of %d texts", truncated, len(records))

    write_embedding_files(rows, index, job.out_data, job.out_index)
    log_path = job.log_path or Path(f"{job.out_data}.log")
    try:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                flag = int(unique_trunc[position[rec.text]])
                fh.write(f"{rec.treebank}\t{rec.sent_id}\t{rec.source}\t{flag}\n")
    except OSError as exc:
        raise ExtractError(f"cannot write provenance log {log_path}: {exc}") from None
    return {"rows": len(records), "dim": encoder.dim, "truncated": truncated}

"""Tests for collection reading, encoding, and file output."""

import json
import logging
import struct

import numpy as np
import pytest
import torch

from embed_extract.cli import main
from embed_extract.encoder import Encoder
from embed_extract.extract import (GENRES, ExtractError, ExtractionJob,
                                   collect_sentences, read_texts, run,
                                   write_embedding_files)

from conftest import conllu_block, write_manifest


def _raw_line(cols: list[str]) -> str:
    return "\t".join(cols + ["_"] * (10 - len(cols)))


def test_read_texts_sources(tmp_path):
    mwt = "\n".join([
        "# sent_id = s3",
        _raw_line(["1-2", "dont"]),
        _raw_line(["1", "do"]),
        _raw_line(["2", "not"]),
        _raw_line(["3", "stop"]),
        _raw_line(["3.1", "ghost"]),
    ])
    blocks = [
        conllu_block("s1", "plain text here", ["plain", "text", "here"]),
        conllu_block("s2", None, ["no", "gap", "after"],
                     ["_", "SpaceAfter=No", "_"]),
        mwt,
    ]
    path = tmp_path / "a.conllu"
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    assert read_texts(path) == [
        ("s1", "plain text here", "text"),
        ("s2", "no gapafter", "tokens"),
        ("s3", "dont stop", "tokens"),
    ]


def test_read_texts_rejects_bad_blocks(tmp_path):
    cases = [
        ("# text = x\n" + _raw_line(["1", "x"]), "without sent_id"),
        (conllu_block("s1", "x", ["x"]) + "\n\n" + conllu_block("s1", "y", ["y"]),
         "duplicate sent_id"),
        ("# sent_id = s1\n" + _raw_line(["1", "x"]) + "\n# text = late",
         "comment after token lines"),
        ("# sent_id = s1\n" + "\t".join(["1", "x", "_"]),
         "expected 10 tab-separated fields"),
        ("# sent_id = s1", "without token lines"),
        (conllu_block("s1", None, [""]), "empty text"),
    ]
    for i, (content, message) in enumerate(cases):
        path = tmp_path / f"bad{i}.conllu"
        path.write_text(content + "\n", encoding="utf-8")
        with pytest.raises(ExtractError, match=message):
            read_texts(path)


def test_collect_sentences_manifest_order(tmp_path):
    manifest = write_manifest(tmp_path, [
        ("tb_b", {"train": [conllu_block("s1", "aa bb", ["aa", "bb"]),
                            conllu_block("s2", "cc", ["cc"])],
                  "test": [conllu_block("s3", "dd", ["dd"])]}),
        ("tb_a", {"train": [conllu_block("s1", "ee", ["ee"])]}),
    ])
    records = collect_sentences(manifest)
    assert [(r.treebank, r.sent_id) for r in records] == [
        ("tb_b", "s1"), ("tb_b", "s2"), ("tb_b", "s3"), ("tb_a", "s1")]
    assert all(r.source == "text" for r in records)


def test_collect_sentences_rejects(tmp_path):
    with pytest.raises(ExtractError, match="cannot read manifest"):
        collect_sentences(tmp_path / "missing.json")
    empty = tmp_path / "empty.json"
    empty.write_text('{"treebanks": []}', encoding="utf-8")
    with pytest.raises(ExtractError, match="lists no treebanks"):
        collect_sentences(empty)
    noid = tmp_path / "noid.json"
    noid.write_text('{"treebanks": [{"genres": ["news"]}]}', encoding="utf-8")
    with pytest.raises(ExtractError, match="without id"):
        collect_sentences(noid)

    (tmp_path / "x.conllu").write_text(
        conllu_block("s1", "xx", ["xx"]) + "\n", encoding="utf-8")
    badsplit = tmp_path / "badsplit.json"
    badsplit.write_text(json.dumps({"treebanks": [
        {"id": "t", "genres": ["news"], "files": {"extra": "x.conllu"}}]}),
        encoding="utf-8")
    with pytest.raises(ExtractError, match="unknown split"):
        collect_sentences(badsplit)

    dup = tmp_path / "dup.json"
    dup.write_text(json.dumps({"treebanks": [
        {"id": "t", "genres": ["news"],
         "files": {"train": "x.conllu", "test": "x.conllu"}}]}),
        encoding="utf-8")
    with pytest.raises(ExtractError, match="more than one split file"):
        collect_sentences(dup)


def test_write_embedding_files_layout(tmp_path):
    rows = np.arange(12, dtype=np.float32).reshape(3, 4)
    index = [("t", "a"), ("t", "b"), ("u", "a")]
    data, idx = tmp_path / "e.bin", tmp_path / "e.idx"
    write_embedding_files(rows, index, data, idx)
    blob = data.read_bytes()
    assert blob[:4] == b"EMB1"
    assert struct.unpack("<II", blob[4:12]) == (3, 4)
    np.testing.assert_array_equal(
        np.frombuffer(blob[12:], dtype="<f4").reshape(3, 4), rows)
    assert idx.read_text(encoding="utf-8") == "t\ta\nt\tb\nu\ta\n"
    with pytest.raises(ExtractError, match="index has 2 keys"):
        write_embedding_files(rows, index[:2], data, idx)


def test_encoder_pooling_matches_manual(tiny_encoder):
    encoder = Encoder(tiny_encoder)
    text = "abc de"
    rows, truncated = encoder.encode([text])
    assert rows.shape == (1, encoder.dim)
    assert not truncated[0]

    enc = encoder.tokenizer([text], return_special_tokens_mask=True,
                            return_tensors="pt")
    special = enc.pop("special_tokens_mask")[0].numpy().astype(bool)
    with torch.no_grad():
        hidden = encoder.model(**enc).last_hidden_state[0].numpy()
    manual = hidden[~special].mean(axis=0)
    np.testing.assert_allclose(rows[0], manual, rtol=1e-5, atol=1e-6)
    assert np.linalg.norm(rows[0]) > 0


def test_encoder_zero_content_fallback(tiny_encoder):
    # control characters tokenize to nothing, leaving only boundary tokens
    encoder = Encoder(tiny_encoder)
    rows, truncated = encoder.encode(["\x01", "abc"], batch_size=2)
    assert np.all(np.isfinite(rows))
    assert np.linalg.norm(rows[0]) > 0
    assert not truncated.any()


def test_encoder_rejects(tiny_encoder, tmp_path):
    with pytest.raises(ExtractError, match="cannot load encoder"):
        Encoder(str(tmp_path / "nothing-here"))
    with pytest.raises(ExtractError, match="cannot use device"):
        Encoder(tiny_encoder, device="bogus device")
    encoder = Encoder(tiny_encoder)
    with pytest.raises(ExtractError, match="batch size"):
        encoder.encode(["ab"], batch_size=0)


def test_run_duplicates_share_rows(tiny_encoder, tmp_path):
    shared = "same words here"
    manifest = write_manifest(tmp_path, [
        ("tb_x", {"train": [conllu_block("s1", shared, shared.split()),
                            conllu_block("s2", "other stuff", ["other", "stuff"])]}),
        ("tb_y", {"train": [conllu_block("s1", shared, shared.split()),
                            conllu_block("s2", "more words", ["more", "words"])]}),
    ])
    paths = {tag: (tmp_path / f"{tag}.bin", tmp_path / f"{tag}.idx")
             for tag in ("a", "b")}
    for data, idx in paths.values():
        summary = run(ExtractionJob(out_data=data, out_index=idx,
                                    manifest=manifest, encoder=tiny_encoder,
                                    batch_size=1))
        assert summary == {"rows": 4, "dim": 32, "truncated": 0}

    blob = paths["a"][0].read_bytes()
    rows = np.frombuffer(blob[12:], dtype="<f4").reshape(4, 32)
    assert np.array_equal(rows[0], rows[2])
    assert not np.array_equal(rows[0], rows[1])
    # rerun lands byte-identical files
    assert blob == paths["b"][0].read_bytes()
    assert paths["a"][1].read_bytes() == paths["b"][1].read_bytes()

    log_lines = (tmp_path / "a.bin.log").read_text(encoding="utf-8").splitlines()
    assert log_lines == ["tb_x\ts1\ttext\t0", "tb_x\ts2\ttext\t0",
                         "tb_y\ts1\ttext\t0", "tb_y\ts2\ttext\t0"]


def test_run_truncation_logged(tiny_encoder, tmp_path, caplog):
    long_text = " ".join(["abcde"] * 8)  # 40 subwords against a limit of 24
    manifest = write_manifest(tmp_path, [
        ("tb", {"train": [conllu_block("long", long_text, long_text.split()),
                          conllu_block("short", "ab cd", ["ab", "cd"])]}),
    ])
    data, idx = tmp_path / "e.bin", tmp_path / "e.idx"
    with caplog.at_level(logging.WARNING, logger="embed_extract"):
        summary = run(ExtractionJob(out_data=data, out_index=idx,
                                    manifest=manifest, encoder=tiny_encoder))
    assert summary["truncated"] == 1
    assert "truncated tb/long" in caplog.text
    lines = (tmp_path / "e.bin.log").read_text(encoding="utf-8").splitlines()
    assert lines == ["tb\tlong\ttext\t1", "tb\tshort\ttext\t0"]
    rows = np.frombuffer(data.read_bytes()[12:], dtype="<f4").reshape(2, 32)
    assert np.all(np.isfinite(rows))


def test_run_labels(tiny_encoder, tmp_path):
    data, idx = tmp_path / "lab.bin", tmp_path / "lab.idx"
    summary = run(ExtractionJob(out_data=data, out_index=idx,
                                encoder=tiny_encoder, labels=True,
                                log_path=tmp_path / "lab.log"))
    assert summary == {"rows": 18, "dim": 32, "truncated": 0}
    assert idx.read_text(encoding="utf-8") == "".join(
        f"{g}\t{g}\n" for g in GENRES)
    blob = data.read_bytes()
    assert struct.unpack("<II", blob[4:12]) == (18, 32)
    assert all(line.endswith("\tlabel\t0") for line in
               (tmp_path / "lab.log").read_text(encoding="utf-8").splitlines())

    # label strings are embedded verbatim, so spellings matter
    encoder = Encoder(tiny_encoder)
    rows, _ = encoder.encode(["nonfiction", "non-fiction"])
    assert not np.array_equal(rows[0], rows[1])


def test_cli(tiny_encoder, tmp_path, capsys):
    manifest = write_manifest(tmp_path, [
        ("tb", {"train": [conllu_block("s1", "aa bb", ["aa", "bb"]),
                          conllu_block("s2", "cc dd", ["cc", "dd"]),
                          conllu_block("s3", "ee", ["ee"])]}),
    ])
    data, idx = tmp_path / "o.bin", tmp_path / "o.idx"
    code = main(["--manifest", str(manifest), "--out-data", str(data),
                 "--out-index", str(idx), "--encoder", tiny_encoder,
                 "--batch-size", "2"])
    assert code == 0
    assert "wrote 3 rows of dim 32" in capsys.readouterr().out
    assert data.exists() and idx.exists()

    code = main(["--out-data", str(data), "--out-index", str(idx),
                 "--encoder", tiny_encoder])
    assert code == 2
    assert "--manifest is required" in capsys.readouterr().err

    code = main(["--manifest", str(tmp_path / "none.json"),
                 "--out-data", str(data), "--out-index", str(idx),
                 "--encoder", tiny_encoder])
    assert code == 2
    assert "cannot read manifest" in capsys.readouterr().err

    code = main(["--labels", "--out-data", str(data), "--out-index", str(idx),
                 "--encoder", tiny_encoder])
    assert code == 0
    assert "wrote 18 rows" in capsys.readouterr().out

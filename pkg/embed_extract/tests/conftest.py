"""Shared fixtures: a tiny local encoder and collection builders."""

import json
import string
from pathlib import Path

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordPiece
from tokenizers.normalizers import BertNormalizer
from tokenizers.pre_tokenizers import BertPreTokenizer
from tokenizers.processors import TemplateProcessing
from transformers import BertConfig, BertModel, PreTrainedTokenizerFast


@pytest.fixture(scope="session")
def tiny_encoder(tmp_path_factory) -> str:
    """A small randomly initialized BERT saved locally, hidden size 32.

    The vocabulary holds single letters and their continuation pieces, so
    any lowercase word tokenizes into one subword per letter. The stored
    length limit of 24 keeps truncation easy to trigger.
    """
    root = tmp_path_factory.mktemp("encoder")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += list(string.ascii_lowercase)
    vocab += ["##" + c for c in string.ascii_lowercase]
    core = Tokenizer(WordPiece({t: i for i, t in enumerate(vocab)},
                               unk_token="[UNK]", max_input_chars_per_word=200))
    core.normalizer = BertNormalizer(lowercase=True)
    core.pre_tokenizer = BertPreTokenizer()
    core.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]", pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab.index("[CLS]")),
                        ("[SEP]", vocab.index("[SEP]"))])
    tokenizer = PreTrainedTokenizerFast(tokenizer_object=core,
                                        unk_token="[UNK]", pad_token="[PAD]",
                                        cls_token="[CLS]", sep_token="[SEP]",
                                        mask_token="[MASK]")
    tokenizer.model_max_length = 24
    config = BertConfig(vocab_size=len(vocab), hidden_size=32,
                        num_hidden_layers=2, num_attention_heads=4,
                        intermediate_size=64, max_position_embeddings=64)
    torch.manual_seed(0)
    model = BertModel(config)
    model.save_pretrained(root)
    tokenizer.save_pretrained(root)
    return str(root)


def conllu_block(sent_id: str, text: str | None, forms: list[str],
                 misc: list[str] | None = None) -> str:
    lines = [f"# sent_id = {sent_id}"]
    if text is not None:
        lines.append(f"# text = {text}")
    misc = misc if misc is not None else ["_"] * len(forms)
    for i, (form, m) in enumerate(zip(forms, misc), start=1):
        lines.append("\t".join([str(i), form] + ["_"] * 7 + [m]))
    return "\n".join(lines)


def write_manifest(root: Path, layout: list[tuple[str, dict[str, list[str]]]]) -> Path:
    """Write conllu files and a manifest; layout maps splits to block lists."""
    entries = []
    for tb_id, files in layout:
        file_map = {}
        for split, blocks in files.items():
            rel = f"{tb_id}-{split}.conllu"
            (root / rel).write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
            file_map[split] = rel
        entries.append({"id": tb_id, "language": "xx", "genres": ["news"],
                        "files": file_map})
    path = root / "manifest.json"
    path.write_text(json.dumps({"treebanks": entries}), encoding="utf-8")
    return path


def word(rng, length: int = 4) -> str:
    letters = rng.integers(0, 26, size=length)
    return "".join(string.ascii_lowercase[int(i)] for i in letters)


def sentence_text(rng, n_words: int = 5) -> str:
    return " ".join(word(rng) for _ in range(n_words))

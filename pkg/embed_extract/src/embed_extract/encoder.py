"""Batched transformer encoding with content-subword mean pooling."""

from __future__ import annotations

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer
from transformers.utils import logging as hf_logging

from .extract import ExtractError


class Encoder:
    """A frozen pretrained encoder pooled into one vector per text."""

    def __init__(self, name: str, device: str = "cpu") -> None:
        hf_logging.disable_progress_bar()
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(name)
            self.model = AutoModel.from_pretrained(name)
        except Exception as exc:  # hub identifiers fail in many library-specific ways
            raise ExtractError(f"cannot load encoder {name!r}: {exc}") from None
        try:
            self.device = torch.device(device)
            self.model.to(self.device)
        except Exception as exc:
            raise ExtractError(f"cannot use device {device!r}: {exc}") from None
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)
        limit = getattr(self.tokenizer, "model_max_length", None)
        if not isinstance(limit, int) or limit > 1_000_000:
            # tokenizers without a stored limit report a sentinel huge value
            limit = int(self.model.config.max_position_embeddings)
        self.max_length = limit

    def encode(self, texts: list[str], batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Encode texts into float32 rows; flags texts cut at the length limit.

        Mean pooling covers content subwords only: padding and special
        boundary positions are excluded. A text whose tokenization yields no
        content subwords falls back to pooling the boundary positions so its
        row stays finite and nonzero.
        """
        if batch_size < 1:
            raise ExtractError(f"batch size must be positive, got {batch_size}")
        truncated = np.zeros(len(texts), dtype=bool)
        chunks: list[np.ndarray] = []
        for lo in range(0, len(texts), batch_size):
            batch = list(texts[lo:lo + batch_size])
            lengths = self.tokenizer(batch, truncation=False, padding=False)["input_ids"]
            truncated[lo:lo + len(batch)] = [len(ids) > self.max_length for ids in lengths]
            enc = self.tokenizer(batch, padding=True, truncation=True,
                                 max_length=self.max_length,
                                 return_special_tokens_mask=True,
                                 return_tensors="pt")
            special = enc.pop("special_tokens_mask").to(self.device)
            enc = {key: val.to(self.device) for key, val in enc.items()}
            with torch.no_grad():
                hidden = self.model(**enc).last_hidden_state
            mask = enc["attention_mask"] * (1 - special)
            empty = mask.sum(dim=1) == 0
            if bool(empty.any()):
                mask[empty] = enc["attention_mask"][empty]
            pooled = (hidden * mask.unsqueeze(-1)).sum(dim=1) / mask.sum(dim=1, keepdim=True)
            chunks.append(pooled.cpu().numpy().astype(np.float32, copy=False))
        if chunks:
            rows = np.concatenate(chunks, axis=0)
        else:
            rows = np.empty((0, self.dim), dtype=np.float32)
        if rows.size and not np.all(np.isfinite(rows)):
            bad = int(np.argwhere(~np.isfinite(rows).all(axis=1))[0][0])
            raise ExtractError(f"non-finite embedding for text at position {bad}")
        return rows, truncated

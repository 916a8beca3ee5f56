"""Word-level hashing tokenizer for turning strings into ``TextBatch`` ids."""

from __future__ import annotations

import re
import zlib

import torch

from .batches import TextBatch
from .config import CLS_ID, NUM_SPECIAL_TOKENS, PAD_ID, SEP_ID

_WORD = re.compile(r"\w+|[^\w\s]")


class HashTokenizer:
    """Lower-cased words hashed (crc32) into the non-reserved id range.

    Deterministic across processes, no vocabulary file. Collisions are
    accepted; this is a test-scale stand-in for a WordPiece vocabulary.
    """

    def __init__(self, vocab_size: int, max_len: int):
        if vocab_size <= NUM_SPECIAL_TOKENS:
            raise ValueError("vocab too small")
        self.vocab_size = vocab_size
        self.max_len = max_len

    def word_id(self, word: str) -> int:
        return NUM_SPECIAL_TOKENS + zlib.crc32(word.encode()) % (self.vocab_size - NUM_SPECIAL_TOKENS)

    def encode_one(self, text: str) -> list[int]:
        words = _WORD.findall(text.lower())[: self.max_len - 2]
        return [CLS_ID] + [self.word_id(w) for w in words] + [SEP_ID]

    def __call__(self, texts: list[str]) -> TextBatch:
        rows = [self.encode_one(t) for t in texts]
        length = max(len(r) for r in rows)
        ids = torch.full((len(rows), length), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(rows), length), dtype=torch.bool)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = True
        return TextBatch(ids, mask)

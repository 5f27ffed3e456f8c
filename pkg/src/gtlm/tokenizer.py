"""Byte-level tokenizer: token ids 0..255 are raw UTF-8 bytes."""
from __future__ import annotations

BYTE_VOCAB = 256
EOS = 256
PAD = 257
VOCAB_SIZE = 258


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors="replace")

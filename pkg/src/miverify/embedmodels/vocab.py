"""Caption tokenization and vocabulary for the visual-semantic model."""

from __future__ import annotations

import re

import numpy as np

from ..datamodel import FeatureDataset

UNK = "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; never empty (falls back to a single UNK)."""
    tokens = _TOKEN_RE.findall(text.lower())
    return tokens if tokens else [UNK]


class Vocabulary:
    """Token -> index map with UNK at index 0."""

    def __init__(self, tokens: list[str]):
        if tokens and tokens[0] == UNK:
            tokens = tokens[1:]
        self.index_to_token = [UNK] + list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def encode(self, text: str) -> np.ndarray:
        """Token index array for a caption; unknown tokens map to UNK (0)."""
        return np.array(
            [self.token_to_index.get(t, 0) for t in tokenize(text)], dtype=np.int64
        )

    def tokens(self) -> list[str]:
        return list(self.index_to_token)


def build_vocab(ds: FeatureDataset, min_count: int = 1) -> Vocabulary:
    """Vocabulary over caption tokens seen at least min_count times, sorted."""
    counts: dict[str, int] = {}
    for pkg in ds:
        for tok in tokenize(pkg.caption_text):
            counts[tok] = counts.get(tok, 0) + 1
    counts.pop(UNK, None)
    kept = sorted(t for t, c in counts.items() if c >= min_count)
    return Vocabulary(kept)

"""Caption feature extraction: mean of pretrained word-embedding vectors.

Tokens missing from the embedding vocabulary are skipped; a caption with no
known token at all becomes a zero vector and logs a warning. The embedding
table travels in the same hash-pinned container format as the image weights.
"""

from __future__ import annotations

import logging
import re

import numpy as np

from .weights import load_weights, save_weights

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


class CaptionFeatureExtractor:
    """Average word vectors over a caption's known tokens."""

    def __init__(self, weights_path, expected_sha256: str | None = None):
        kind, arrays, meta = load_weights(weights_path, expected_sha256)
        if kind != "wordvec":
            raise ValueError(f"{weights_path}: expected wordvec weights, got {kind!r}")
        if "vectors" not in arrays:
            raise ValueError(f"{weights_path}: missing 'vectors' array")
        tokens = meta.get("tokens")
        if not isinstance(tokens, list) or len(tokens) != len(arrays["vectors"]):
            raise ValueError(f"{weights_path}: token list does not match vector count")
        self.vectors = arrays["vectors"]
        self.index = {t: i for i, t in enumerate(tokens)}
        self.meta = meta
        self.d_cap = int(self.vectors.shape[1])

    def extract(self, caption: str, caption_id: str | None = None) -> np.ndarray:
        known = [self.index[t] for t in tokenize(caption) if t in self.index]
        if not known:
            logger.warning(
                "caption %s has no in-vocabulary token; emitting a zero vector",
                caption_id if caption_id is not None else repr(caption),
            )
            return np.zeros(self.d_cap)
        return self.vectors[known].mean(axis=0)


def make_default_wordvec(path, tokens, d_cap: int = 32, seed: int = 0) -> None:
    """Write a fixed random embedding table over ``tokens`` to ``path``."""
    ordered = sorted(set(tokens))
    rng = np.random.default_rng(seed)
    arrays = {"vectors": rng.normal(scale=1.0 / np.sqrt(d_cap), size=(len(ordered), d_cap))}
    meta = {
        "id": f"wordvec-{d_cap}-seed{seed}",
        "tokens": ordered,
        "d_cap": d_cap,
    }
    save_weights(path, "wordvec", arrays, meta)

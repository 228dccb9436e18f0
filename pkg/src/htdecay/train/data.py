"""Byte-level corpora: file loading, synthetic text, batch sampling."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_CONSONANTS = "bcdfghjklmnpqrstvwz"
_VOWELS = "aeiou"


def load_corpus(path: str | Path) -> np.ndarray:
    """Raw bytes of a file as a uint8 array."""
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"{path}: corpus is empty")
    return np.frombuffer(data, dtype=np.uint8).copy()


def synthetic_corpus(n_bytes: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-text: zipf-weighted made-up words in sentences.

    Structured enough for a byte-level model to learn (letter bigrams,
    spaces, sentence punctuation) without shipping a real text file.
    Only ``rng.random()`` draws are used, keeping the stream simple.
    """
    if n_bytes <= 0:
        raise ValueError("n_bytes must be positive")
    rng = np.random.default_rng((seed, 0xC0DE))
    n_words = 400
    words = []
    for _ in range(n_words):
        n_syll = 1 + int(rng.random() * 3)
        words.append(
            "".join(
                _CONSONANTS[int(rng.random() * len(_CONSONANTS))]
                + _VOWELS[int(rng.random() * len(_VOWELS))]
                for _ in range(n_syll)
            )
        )
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    cdf = np.cumsum(1.0 / ranks)
    cdf /= cdf[-1]

    parts: list[str] = []
    size = 0
    sentences_in_par = 0
    while size < n_bytes:
        n_in_sentence = 4 + int(rng.random() * 9)
        draws = rng.random(n_in_sentence)
        idx = np.searchsorted(cdf, draws)
        sentence = " ".join(words[int(i)] for i in idx)
        sentences_in_par += 1
        if sentences_in_par >= 5 and rng.random() < 0.4:
            sentence += ".\n"
            sentences_in_par = 0
        else:
            sentence += ". "
        parts.append(sentence)
        size += len(sentence)
    text = "".join(parts)[:n_bytes].encode("ascii")
    return np.frombuffer(text, dtype=np.uint8).copy()


def sample_batch(
    data: np.ndarray, seed: int, t: int, batch: int, seq_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic batch for step ``t``: inputs and next-token targets."""
    if len(data) < seq_len + 2:
        raise ValueError(f"corpus of {len(data)} bytes too small for seq_len={seq_len}")
    rng = np.random.default_rng((seed, t))
    starts = rng.integers(0, len(data) - seq_len - 1, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)
    windows = data[idx].astype(np.int64)
    return windows[:, :-1], windows[:, 1:]

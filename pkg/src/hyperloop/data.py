"""Byte-level token streams and a seeded synthetic text corpus.

Every byte is a token (0..255) and id 256 is BOS, so V = 257. A training
window of ``T`` bytes ``w`` becomes the input ``[BOS] + w[:-1]`` and the
target ``w``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rng import stream

BOS = 256
VOCAB_SIZE = 257

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st", "ch", "sh", "br", "tr", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ea", "ou", "ai", "y"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "nd", "ng", "ck"]


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> str:
    ids = np.asarray(tokens)
    return bytes(int(t) for t in ids if 0 <= t < 256).decode("utf-8", errors="replace")


def synthetic_corpus(n_bytes: int = 1_200_000, seed: int = 0, vocab: int = 3000) -> bytes:
    """English-like text from a seeded word-level Markov chain.

    Words are built from syllables and drawn with Zipf frequencies; each
    word prefers a small fixed set of successors, so there is structure to
    learn at the character, word and bigram level.
    """
    rng = stream(seed, "corpus")
    words = []
    seen = set()
    while len(words) < vocab:
        k = min(int(rng.geometric(0.5)), 4)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(k)) + rng.choice(_CODAS)
        if w not in seen:
            seen.add(w)
            words.append(w)
    zipf = 1.0 / np.arange(1, vocab + 1) ** 1.1
    zipf /= zipf.sum()
    successors = rng.choice(vocab, size=(vocab, 6), p=zipf)

    out = []
    size = 0
    capital = True
    prev = int(rng.choice(vocab, p=zipf))
    sentence_len = 0
    # draw randomness in blocks to keep the python loop light
    while size < n_bytes:
        coins = rng.random(4096)
        picks = rng.choice(vocab, size=4096, p=zipf)
        slots = rng.integers(0, 6, size=4096)
        for c, g, s in zip(coins, picks, slots):
            cur = int(successors[prev, s]) if c < 0.6 else int(g)
            w = words[cur]
            if capital:
                w = w.capitalize()
                capital = False
            sentence_len += 1
            end = c > 0.6 and sentence_len >= 4 and (c * 97) % 1.0 < 0.12
            if end:
                tail = "." if (c * 13) % 1.0 < 0.85 else "?"
                w += tail + ("\n" if (c * 31) % 1.0 < 0.15 else " ")
                capital = True
                sentence_len = 0
            elif (c * 53) % 1.0 < 0.04:
                w += ", "
            else:
                w += " "
            out.append(w)
            size += len(w)
            prev = cur
            if size >= n_bytes:
                break
    return "".join(out).encode("ascii")[:n_bytes]


def load_corpus(path: str | os.PathLike | None = None, n_bytes: int = 1_200_000, seed: int = 0) -> np.ndarray:
    """Token ids of a text file, or of the synthetic corpus when ``path`` is None."""
    if path is None:
        return encode(synthetic_corpus(n_bytes, seed))
    with open(path, "rb") as fh:
        return encode(fh.read())


@dataclass
class TokenStream:
    """A corpus split into a training range and a held-out tail.

    The two ranges are disjoint byte intervals ``[0, split)`` and
    ``[split, len)``. Training windows are non-overlapping and visited in a
    fixed seeded order, so the batch at any step is a pure function of
    (corpus, seq_len, batch_size, seed, step).
    """

    tokens: np.ndarray
    seq_len: int
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise InputError("corpus must be a 1-D token array")
        self.split = int(round(len(self.tokens) * (1.0 - self.heldout_fraction)))
        T = self.seq_len
        if self.split < T or len(self.tokens) - self.split < T:
            raise InputError(f"corpus of {len(self.tokens)} tokens too short for seq_len={T} and the held-out split")
        starts = np.arange(0, self.split - T + 1, T)
        self.train_starts = stream(self.seed, "data.order").permutation(starts)
        self.heldout_starts = np.arange(self.split, len(self.tokens) - T + 1, T)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def heldout(self) -> np.ndarray:
        return self.tokens[self.split :]

    def window(self, start: int) -> tuple[np.ndarray, np.ndarray]:
        w = self.tokens[start : start + self.seq_len]
        return np.concatenate([[BOS], w[:-1]]), w

    def _stack(self, starts) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.window(int(s)) for s in starts]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def batch(self, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """``(inputs, targets)`` of shape ``(batch_size, seq_len)`` for training step ``step``."""
        n = len(self.train_starts)
        idx = (np.arange(batch_size) + step * batch_size) % n
        return self._stack(self.train_starts[idx])

    def heldout_batches(self, batch_size: int, max_windows: int | None = None):
        """Non-overlapping held-out windows in order."""
        starts = self.heldout_starts if max_windows is None else self.heldout_starts[:max_windows]
        for i in range(0, len(starts), batch_size):
            yield self._stack(starts[i : i + batch_size])
